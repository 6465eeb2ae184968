//! Global class table and per-pixel label maps.

use crate::error::{Error, Result};

pub type ClassId = u8;

/// Reserved label value for pixels that carry no supervision.
pub const IGNORE_ID: ClassId = 255;

pub const NUM_CLASSES: usize = 6;

/// Class table shared by every domain. Two confusable pairs:
/// road/sidewalk and bike/motorbike.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["road", "sidewalk", "sky", "building", "bike", "motorbike"];

pub const ROAD: ClassId = 0;
pub const SIDEWALK: ClassId = 1;
pub const SKY: ClassId = 2;
pub const BUILDING: ClassId = 3;
pub const BIKE: ClassId = 4;
pub const MOTORBIKE: ClassId = 5;

pub fn class_index(name: &str) -> Option<ClassId> {
    CLASS_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
        .map(|i| i as ClassId)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<ClassId>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, class: ClassId) -> Self {
        Self { height, width, values: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[ClassId] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ClassId] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: ClassId) {
        self.values[y * self.width + x] = class;
    }

    /// Checks every value is `< num_classes` or the ignore id.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.values.iter().find(|&&v| v != IGNORE_ID && v as usize >= num_classes) {
            Some(v) => Err(Error::invalid(format!("label {v} outside [0, {num_classes})"))),
            None => Ok(()),
        }
    }

    /// Sorted distinct non-ignore classes present in the map.
    pub fn present_classes(&self) -> Vec<ClassId> {
        let mut seen = [false; 256];
        for &v in &self.values {
            seen[v as usize] = true;
        }
        (0..=254u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Nearest-neighbour resampling with the same pixel-centre convention as
    /// [`crate::tensor::nearest_resize`].
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        let rows = crate::tensor::nearest_indices(self.height, height);
        let cols = crate::tensor::nearest_indices(self.width, width);
        let mut values = Vec::with_capacity(height * width);
        for &sy in &rows {
            for &sx in &cols {
                values.push(self.get(sy, sx));
            }
        }
        LabelMap { height, width, values }
    }
}

/// Concatenates equally sized label maps into one flat `[N, H, W]` buffer.
pub fn stack_labels(maps: &[&LabelMap]) -> Result<Vec<ClassId>> {
    let first = maps.first().ok_or_else(|| Error::invalid("empty label batch"))?;
    let mut out = Vec::with_capacity(maps.len() * first.values.len());
    for m in maps {
        if m.height != first.height || m.width != first.width {
            return Err(Error::dim("label maps in a batch differ in size"));
        }
        out.extend_from_slice(&m.values);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn present_classes_skips_ignore() {
        let m = LabelMap::new(2, 2, vec![3, IGNORE_ID, 1, 3]).unwrap();
        assert_eq!(m.present_classes(), vec![1, 3]);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let m = LabelMap::new(1, 2, vec![0, 9]).unwrap();
        assert!(m.validate(6).is_err());
        assert!(LabelMap::filled(1, 1, IGNORE_ID).validate(6).is_ok());
    }

    #[test]
    fn class_lookup_is_case_insensitive() {
        assert_eq!(class_index("MotorBike"), Some(MOTORBIKE));
        assert_eq!(class_index("truck"), None);
    }
}
