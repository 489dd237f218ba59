//! Small synthetic data roots in the canonical on-disk formats, for smoke runs
//! and tests without the real datasets.
//!
//! Each dataset family draws from its own image distribution, and classes
//! within a family are separable by a per-class stripe.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CIFAR10_CLASSES, CINIC10_CIFAR_PREFIX, HEIGHT, IMAGE_LEN, WIDTH};
use crate::error::Result;

const PLANE: usize = HEIGHT * WIDTH;

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSizes {
    /// Train examples per class for CIFAR-10, split over the 5 batch files.
    pub cifar10_train_per_class: usize,
    pub cifar10_test_per_class: usize,
    /// CIFAR-100 examples per split (labels cycle through all 100 classes).
    pub cifar100_per_split: usize,
    pub svhn_per_split: usize,
    /// CINIC-10 examples per class and split; half carry the CIFAR-10 prefix.
    pub cinic_per_class: usize,
}

impl Default for SyntheticSizes {
    fn default() -> Self {
        SyntheticSizes {
            cifar10_train_per_class: 30,
            cifar10_test_per_class: 10,
            cifar100_per_split: 200,
            svhn_per_split: 200,
            cinic_per_class: 24,
        }
    }
}

#[derive(Clone, Copy)]
enum Family {
    Cifar10,
    Cifar100,
    Svhn,
    Cinic,
}

/// CHW bytes for one synthetic image.
fn image(family: Family, label: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut px = vec![0u8; IMAGE_LEN];
    for (i, p) in px.iter_mut().enumerate() {
        let c = i / PLANE;
        let base = match family {
            Family::Cifar10 => 40 + 20 * c as u8,
            Family::Cifar100 => 150,
            Family::Svhn => 90,
            Family::Cinic => 60 + 10 * c as u8,
        };
        *p = base + rng.random_range(0..50);
    }
    for c in 0..3 {
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let on = match family {
                    Family::Cifar10 | Family::Cinic => x / 3 == label,
                    Family::Cifar100 => y / 3 == label % 10 && x < 16 + label / 10,
                    Family::Svhn => (x / 4 + y / 4) % 2 == 0 && (x + y) % 10 == label,
                };
                if on {
                    px[c * PLANE + y * WIDTH + x] = 250 - 30 * c as u8;
                }
            }
        }
    }
    px
}

fn cifar_records(
    family: Family,
    labels: &[usize],
    label_bytes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * (label_bytes + IMAGE_LEN));
    for &l in labels {
        if label_bytes == 2 {
            out.push((l / 5) as u8);
        }
        out.push(l as u8);
        out.extend(image(family, l, rng));
    }
    out
}

fn tagged(kind: u32, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + data.len() + 7);
    out.extend(kind.to_le_bytes());
    out.extend((data.len() as u32).to_le_bytes());
    out.extend(data);
    out.resize(out.len().next_multiple_of(8), 0);
    out
}

/// One uncompressed MAT v5 numeric matrix element.
fn mat_matrix(name: &str, dims: &[usize], class: u8, elem_kind: u32, data: &[u8]) -> Vec<u8> {
    let mut flags = Vec::new();
    flags.extend(u32::from(class).to_le_bytes());
    flags.extend(0u32.to_le_bytes());
    let dim_bytes: Vec<u8> = dims
        .iter()
        .flat_map(|&d| (d as i32).to_le_bytes())
        .collect();
    let mut body = tagged(6, &flags);
    body.extend(tagged(5, &dim_bytes));
    body.extend(tagged(1, name.as_bytes()));
    body.extend(tagged(elem_kind, data));
    tagged(14, &body)
}

/// A MAT v5 file holding `X` (32×32×3×N uint8, column-major) and `y` (N×1 double).
pub fn svhn_mat_bytes(images_chw: &[Vec<u8>], labels: &[u8]) -> Vec<u8> {
    let n = images_chw.len();
    let mut x = vec![0u8; n * IMAGE_LEN];
    for (i, chw) in images_chw.iter().enumerate() {
        for c in 0..3 {
            for r in 0..HEIGHT {
                for col in 0..WIDTH {
                    x[r + HEIGHT * (col + WIDTH * (c + 3 * i))] = chw[c * PLANE + r * WIDTH + col];
                }
            }
        }
    }
    let y: Vec<u8> = labels
        .iter()
        .flat_map(|&l| f64::from(l).to_le_bytes())
        .collect();
    let mut header = b"MATLAB 5.0 MAT-file, synthetic".to_vec();
    header.resize(116, b' ');
    header.extend([0u8; 8]);
    header.extend(0x0100u16.to_le_bytes());
    header.extend(*b"IM");
    header.extend(mat_matrix("X", &[HEIGHT, WIDTH, 3, n], 9, 2, &x));
    header.extend(mat_matrix("y", &[n, 1], 6, 9, &y));
    header
}

fn write_png(path: &Path, chw: &[u8]) -> Result<()> {
    let img = image::RgbImage::from_fn(WIDTH as u32, HEIGHT as u32, |x, y| {
        let at = |c: usize| chw[c * PLANE + y as usize * WIDTH + x as usize];
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Writes CIFAR-10, CIFAR-100, SVHN and CINIC-10 layouts under `root`.
pub fn write_synthetic_root(root: &Path, sizes: SyntheticSizes, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dir = root.join("cifar-10-batches-bin");
    fs::create_dir_all(&dir)?;
    let train: Vec<usize> = (0..sizes.cifar10_train_per_class * 10)
        .map(|i| i % 10)
        .collect();
    let per_batch = train.len().div_ceil(5);
    for (b, chunk) in train.chunks(per_batch).enumerate() {
        fs::write(
            dir.join(format!("data_batch_{}.bin", b + 1)),
            cifar_records(Family::Cifar10, chunk, 1, &mut rng),
        )?;
    }
    let test: Vec<usize> = (0..sizes.cifar10_test_per_class * 10)
        .map(|i| i % 10)
        .collect();
    fs::write(
        dir.join("test_batch.bin"),
        cifar_records(Family::Cifar10, &test, 1, &mut rng),
    )?;

    let dir = root.join("cifar-100-binary");
    fs::create_dir_all(&dir)?;
    let labels: Vec<usize> = (0..sizes.cifar100_per_split).map(|i| i % 100).collect();
    for name in ["train.bin", "test.bin"] {
        fs::write(
            dir.join(name),
            cifar_records(Family::Cifar100, &labels, 2, &mut rng),
        )?;
    }

    let dir = root.join("svhn");
    fs::create_dir_all(&dir)?;
    for split in ["train", "test"] {
        let labels: Vec<u8> = (0..sizes.svhn_per_split).map(|i| (i % 10) as u8).collect();
        let images: Vec<Vec<u8>> = labels
            .iter()
            .map(|&l| image(Family::Svhn, usize::from(l), &mut rng))
            .collect();
        // digit 0 is stored as 10
        let stored: Vec<u8> = labels
            .iter()
            .map(|&l| if l == 0 { 10 } else { l })
            .collect();
        fs::write(
            dir.join(format!("{split}_32x32.mat")),
            svhn_mat_bytes(&images, &stored),
        )?;
    }

    for split in ["train", "test"] {
        for (label, class) in CIFAR10_CLASSES.iter().enumerate() {
            let dir = root.join("cinic-10").join(split).join(class);
            fs::create_dir_all(&dir)?;
            for i in 0..sizes.cinic_per_class {
                let (family, name) = if i % 2 == 0 {
                    (
                        Family::Cifar10,
                        format!("{CINIC10_CIFAR_PREFIX}{split}-{i:05}.png"),
                    )
                } else {
                    (Family::Cinic, format!("n{label:08}_{i:05}.png"))
                };
                write_png(&dir.join(name), &image(family, label, &mut rng))?;
            }
        }
    }
    Ok(())
}
