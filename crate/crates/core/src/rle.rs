//! Uncompressed COCO run-length encoding of binary masks: column-major runs
//! that alternate between background and foreground, starting with background.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn encode(mask: &Array2<bool>) -> Rle {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for x in 0..w {
        for y in 0..h {
            let v = mask[[y, x]];
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle { size: [h, w], counts }
}

pub fn decode(rle: &Rle) -> Result<Array2<bool>> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(Error::Input(format!("RLE covers {total} pixels, mask has {}", h * w)));
    }
    let mut mask = Array2::from_elem((h, w), false);
    let mut pos = 0;
    for (i, &n) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + n {
                mask[[p % h, p / h]] = true;
            }
        }
        pos += n;
    }
    Ok(mask)
}

/// Foreground pixel count without decoding.
pub fn area(rle: &Rle) -> usize {
    rle.counts.iter().skip(1).step_by(2).sum()
}
