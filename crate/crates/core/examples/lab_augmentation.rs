//! Chromatic augmentation of a few-shot target pool: shifts in the Lab a/b
//! channels change colour while leaving lightness alone.
//!
//! `cargo run --release --example lab_augmentation -- [out.png]`

use fewshot_gan::data::{augment_target_pool, rgb_to_lab, AugmentationConfig};
use fewshot_gan::eval::emit_grid;
use fewshot_gan::toy::ToyTask;

fn mean_lab(img: &fewshot_gan::data::ImageSample) -> [f32; 3] {
    let px = img.pixels().data().chunks(3);
    let n = px.len() as f32;
    let mut acc = [0.0f32; 3];
    for p in px {
        let lab = rgb_to_lab([p[0], p[1], p[2]]);
        for k in 0..3 {
            acc[k] += lab[k] / n;
        }
    }
    acc
}

fn main() -> fewshot_gan::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "augmented.png".into());
    let task = ToyTask::generate(200, 6, 0, 32, 1)?;
    let cfg = AugmentationConfig {
        chroma_shift_range: 25.0,
        copies_per_sample: 8,
    };
    let pool = augment_target_pool(&task.dataset, &cfg, 7)?;
    println!(
        "{} targets x {} copies = {} images",
        task.dataset.n_target(),
        cfg.copies_per_sample,
        pool.len()
    );

    for (i, orig) in task.dataset.target_pool().iter().enumerate() {
        let [l, a, b] = mean_lab(orig);
        print!("target {i}: L {l:5.1} a {a:6.1} b {b:6.1} | copies a/b:");
        for copy in &pool[i * cfg.copies_per_sample..(i + 1) * cfg.copies_per_sample] {
            let [_, a, b] = mean_lab(copy);
            print!(" {a:.0}/{b:.0}");
        }
        println!();
    }
    emit_grid(
        &pool,
        task.dataset.n_target(),
        cfg.copies_per_sample,
        std::path::Path::new(&out),
    )?;
    println!("wrote {out}");
    Ok(())
}
