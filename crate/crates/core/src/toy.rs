//! Small synthetic VOC-layout datasets for demos and tests.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::dataset::{voc_palette, DatasetError, DatasetIndex, LabelMask, LabelSchema, NewSample};

/// One toy sample: id and the foreground classes painted into its mask.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub id: String,
    pub classes: Vec<u8>,
}

impl ToySample {
    pub fn new(id: &str, classes: &[u8]) -> Self {
        Self { id: id.to_string(), classes: classes.to_vec() }
    }
}

/// Mask with one vertical band per class separated by background, plus a
/// void border row at the bottom.
pub fn toy_mask(classes: &[u8], width: u32, height: u32) -> LabelMask {
    let bands = classes.len() as u32 * 2 + 1;
    let band_w = (width / bands).max(1);
    let pixels = (0..height)
        .flat_map(|y| {
            (0..width).map(move |x| {
                if y == height - 1 {
                    return 255;
                }
                let band = x / band_w;
                if band % 2 == 1 && ((band / 2) as usize) < classes.len() && y >= height / 6 && y < height - height / 6
                {
                    classes[(band / 2) as usize]
                } else {
                    0
                }
            })
        })
        .collect();
    LabelMask::new(width, height, pixels).expect("sizes agree")
}

/// Image whose regions follow the mask colors with a mild texture.
pub fn toy_image(mask: &LabelMask, salt: u32) -> RgbImage {
    let palette = voc_palette();
    RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        let v = mask.get(x, y) as usize;
        let base = if v == 255 { [40, 40, 40] } else { [palette[3 * v], palette[3 * v + 1], palette[3 * v + 2]] };
        let tex = ((x * 7 + y * 13 + salt * 31) % 23) as u8;
        Rgb([base[0].saturating_add(tex), base[1].saturating_add(tex / 2), base[2].saturating_add(tex / 3)])
    })
}

/// Writes `samples` as a real VOC-layout dataset at `root`.
pub fn write_toy_dataset(
    root: &Path,
    split: &str,
    schema: &LabelSchema,
    samples: &[ToySample],
    size: (u32, u32),
) -> Result<DatasetIndex, DatasetError> {
    let mut index = DatasetIndex::create(root, split, schema)?;
    for (i, s) in samples.iter().enumerate() {
        let mask = toy_mask(&s.classes, size.0, size.1);
        let image = toy_image(&mask, i as u32);
        index.write_sample(NewSample { sample_id: s.id.clone(), image, mask, provenance: None })?;
    }
    Ok(index)
}

/// Ten 32x32 images over five VOC classes, person-heavy.
pub fn ten_image_fixture() -> Vec<ToySample> {
    vec![
        ToySample::new("t00", &[15]),
        ToySample::new("t01", &[15]),
        ToySample::new("t02", &[12, 15]),
        ToySample::new("t03", &[8, 15]),
        ToySample::new("t04", &[15]),
        ToySample::new("t05", &[12]),
        ToySample::new("t06", &[8, 12]),
        ToySample::new("t07", &[3, 15]),
        ToySample::new("t08", &[15]),
        ToySample::new("t09", &[8]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{classes_of, ClassId};

    #[test]
    fn mask_contains_exactly_the_requested_classes() {
        let m = toy_mask(&[3, 15], 32, 32);
        assert_eq!(classes_of(&m).into_iter().collect::<Vec<_>>(), vec![ClassId(3), ClassId(15)]);
        assert!(m.pixels().contains(&255));
        assert!(classes_of(&toy_mask(&[], 32, 32)).is_empty());
    }
}
