use std::collections::BTreeSet;
use std::io::Cursor;

use super::schema::{voc_palette, ClassId, LabelSchema, BACKGROUND, VOID};
use super::DatasetError;

/// Per-pixel class labels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        if width == 0 || height == 0 {
            return Err(DatasetError::InvalidMask("mask dimensions must be positive".into()));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(DatasetError::InvalidMask(format!(
                "expected {} pixels for {}x{}, got {}",
                width as usize * height as usize,
                width,
                height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self, DatasetError> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Checks every pixel against the schema.
    pub fn validate(&self, schema: &LabelSchema) -> Result<(), DatasetError> {
        match self.pixels.iter().find(|&&v| !schema.is_valid_pixel(v)) {
            Some(&v) => Err(DatasetError::OutOfSchema(v)),
            None => Ok(()),
        }
    }
}

/// Distinct foreground classes present in `mask`, ascending.
pub fn classes_of(mask: &LabelMask) -> BTreeSet<ClassId> {
    let mut seen = [false; 256];
    for &v in &mask.pixels {
        seen[v as usize] = true;
    }
    seen[BACKGROUND as usize] = false;
    seen[VOID as usize] = false;
    seen.iter().enumerate().filter(|(_, &s)| s).map(|(v, _)| ClassId(v as u8)).collect()
}

/// Decodes an 8-bit palette PNG, taking the palette indices verbatim.
pub fn decode_mask(png_bytes: &[u8], schema: &LabelSchema) -> Result<LabelMask, DatasetError> {
    let mut decoder = png::Decoder::new(Cursor::new(png_bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| DatasetError::InvalidMask(e.to_string()))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if color != png::ColorType::Indexed || depth != png::BitDepth::Eight {
        return Err(DatasetError::NotIndexed(format!("{color:?} at {depth:?}")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| DatasetError::InvalidMask("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| DatasetError::InvalidMask(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let pixels = if frame.line_size == w {
        buf.truncate(w * h);
        buf
    } else {
        buf.chunks(frame.line_size).take(h).flat_map(|row| &row[..w]).copied().collect()
    };
    let mask = LabelMask::new(frame.width, frame.height, pixels)?;
    mask.validate(schema)?;
    Ok(mask)
}

/// Encodes `mask` as an 8-bit palette PNG using the VOC colormap.
pub fn encode_mask(mask: &LabelMask) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, mask.width, mask.height);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_palette(voc_palette());
        let mut writer = encoder.write_header().map_err(|e| DatasetError::Encode(e.to_string()))?;
        writer.write_image_data(&mask.pixels).map_err(|e| DatasetError::Encode(e.to_string()))?;
        writer.finish().map_err(|e| DatasetError::Encode(e.to_string()))?;
    }
    Ok(out)
}
