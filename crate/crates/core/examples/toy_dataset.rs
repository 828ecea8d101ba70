//! Writes the ten-image toy dataset: `cargo run --example toy_dataset -- <dir>`.

use ctrlaug_core::toy::{ten_image_fixture, write_toy_dataset};
use ctrlaug_core::LabelSchema;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "toy-voc".into());
    let index = write_toy_dataset(dir.as_ref(), "train", &LabelSchema::voc(), &ten_image_fixture(), (32, 32))
        .expect("write toy dataset");
    println!("wrote {} samples to {dir}", index.len());
}
