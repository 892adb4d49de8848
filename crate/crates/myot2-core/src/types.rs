//! Small domain types shared by several modules.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of segmentation classes: background, LV blood pool, myocardium, RV.
pub const NUM_CLASSES: usize = 4;

/// Class index of the left-ventricular blood pool.
pub const CLASS_LV: u8 = 1;
/// Class index of the myocardium.
pub const CLASS_MYO: u8 = 2;
/// Class index of the right ventricle.
pub const CLASS_RV: u8 = 3;

/// Dense 4-class label map for one slice. Row-major, `data[h * width + w]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {}x{} needs {} entries, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range 0..{}",
                bad, NUM_CLASSES
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.data[h * self.width + w]
    }

    /// Boolean mask of the pixels belonging to `class_id`.
    pub fn class_mask(&self, class_id: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class_id).collect()
    }

    /// Mean (row, col) position of the pixels in `class_id`, `None` when the
    /// class is absent.
    pub fn class_centroid(&self, class_id: u8) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sh, mut sw) = (0.0, 0.0);
        for h in 0..self.height {
            for w in 0..self.width {
                if self.get(h, w) == class_id {
                    sh += h as f64;
                    sw += w as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some((sh / n as f64, sw / n as f64))
        }
    }
}
