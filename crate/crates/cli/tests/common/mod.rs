//! Shared test support: a synthetic product corpus and helpers for
//! driving the command-line binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shelfscan_core::img::save_png;
use shelfscan_core::tensor::Tensor;

pub const BIN: &str = env!("CARGO_BIN_EXE_shelfscan");

pub struct Corpus {
    pub manifest: PathBuf,
    /// (product_id, category_id) in manifest order.
    pub products: Vec<(String, String)>,
}

/// Writes `n` synthetic 32x32 product PNGs plus a manifest CSV into `dir`.
/// Products fall into 5 categories; products of one category share a band
/// layout and palette and differ only in band-color shifts plus a coarse
/// variant-specific print covering the whole label, so they are confusable
/// for a random-weight embedder under blur and cropping but separable
/// after training — and any sub-region of a label identifies its variant.
pub fn write_corpus(dir: &Path, n: usize) -> Corpus {
    let products_dir = dir.join("products");
    std::fs::create_dir_all(&products_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let palettes: Vec<[f32; 3]> = (0..5)
        .map(|_| {
            [
                0.2 + 0.6 * rng.random::<f32>(),
                0.2 + 0.6 * rng.random::<f32>(),
                0.2 + 0.6 * rng.random::<f32>(),
            ]
        })
        .collect();
    let mut manifest = String::from("product_id,category_id,image_path\n");
    let mut products = Vec::new();
    for p in 0..n {
        let cat = p % 5;
        let variant = p / 5;
        let image = product_image(32, palettes[cat], cat, variant, &mut rng);
        let id = format!("prod_{p:03}");
        let file = format!("{id}.png");
        save_png(&image, products_dir.join(&file)).unwrap();
        manifest.push_str(&format!("{id},cat_{cat},products/{file}\n"));
        products.push((id, format!("cat_{cat}")));
    }
    let manifest_path = dir.join("refs.csv");
    std::fs::write(&manifest_path, manifest).unwrap();
    Corpus { manifest: manifest_path, products }
}

fn product_image(
    size: usize,
    base: [f32; 3],
    cat: usize,
    variant: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let band_h = 2 + cat;
    let shift = [
        0.12 * ((variant % 4) as f32 - 1.5),
        0.12 * (((variant / 2) % 4) as f32 - 1.5),
        0.12 * (((variant / 4) % 4) as f32 - 1.5),
    ];
    // A variant-specific print: a coarse grid of brightness modulations
    // covering the whole label. Cells are 8px so the pattern survives
    // the strongest default blur, and multiplicative so global brightness
    // and saturation changes keep the relative pattern intact.
    let mut print_rng = ChaCha8Rng::seed_from_u64(((cat as u64) << 32) | variant as u64);
    let cells = size.div_ceil(8);
    let print: Vec<f32> =
        (0..cells * cells).map(|_| (print_rng.random::<f32>() - 0.5) * 0.5).collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let in_band = (y / band_h) % 2 == 0;
            let m = 1.0 + print[(y / 8) * cells + (x / 8)];
            for c in 0..3 {
                let tone = if in_band {
                    (base[c] + shift[c]).clamp(0.0, 1.0)
                } else {
                    base[c] * 0.5
                };
                let px = (tone * m).clamp(0.0, 1.0);
                data.push((px + (rng.random::<f32>() - 0.5) * 0.04).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).unwrap()
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary should run")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed (status {:?})\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}
