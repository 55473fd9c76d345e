#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsdet_core::annotation::{DatasetManifest, Detection, ImageRecord, Modality};
use rsdet_core::geometry::{BBox, Dims};

pub const CLASSES: [&str; 4] = ["ship", "airplane", "storage tank", "harbor"];

/// Random records whose boxes survive a resize to 644×644 (every side ≥ 8 px
/// in a frame no larger than 1024 px).
pub fn synthetic_records(n: usize, seed: u64) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let dims = Dims::new(rng.random_range(256..=1024), rng.random_range(256..=1024)).unwrap();
            let count = rng.random_range(0..=6);
            let detections = (0..count)
                .map(|_| {
                    let w = rng.random_range(8..=dims.width / 4);
                    let h = rng.random_range(8..=dims.height / 4);
                    let x = rng.random_range(0..=dims.width - w);
                    let y = rng.random_range(0..=dims.height - h);
                    let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap();
                    Detection::new(bbox, CLASSES[rng.random_range(0..CLASSES.len())])
                })
                .collect();
            ImageRecord::new(format!("img_{i:04}"), format!("images/img_{i:04}.png"), dims, detections).unwrap()
        })
        .collect()
}

pub fn synthetic_manifest(n: usize, seed: u64) -> DatasetManifest {
    DatasetManifest::new("synthetic", Modality::Optical, vec![], synthetic_records(n, seed)).unwrap()
}
