//! Interrupting training and resuming from a checkpoint reproduces the
//! uninterrupted loss stream exactly.
//!
//! `cargo run --release --example checkpoint_resume`

use fewshot_gan::checkpoint;
use fewshot_gan::nets::ArchConfig;
use fewshot_gan::toy::ToyTask;
use fewshot_gan::train::{train_stage1_step, TrainConfig, TrainState};

fn main() -> fewshot_gan::Result<()> {
    let arch = ArchConfig {
        image_size: 16,
        base_width: 8,
        stages: 3,
        content_dim: 16,
        appearance_dim: 4,
    };
    let cfg = TrainConfig {
        stage1_batch: 8,
        ..TrainConfig::default()
    };
    let task = ToyTask::generate(200, 10, 0, 16, 0)?;
    let d = &task.dataset;

    let mut straight = TrainState::new(&arch, &cfg)?;
    let reference: Vec<_> = (0..20)
        .map(|_| train_stage1_step(&mut straight, d, &cfg))
        .collect::<Result<_, _>>()?;

    let mut first = TrainState::new(&arch, &cfg)?;
    for _ in 0..10 {
        train_stage1_step(&mut first, d, &cfg)?;
    }
    let path = std::env::temp_dir().join("fewshot_gan_resume.safetensors");
    checkpoint::save(&first, &path)?;
    let meta = checkpoint::read_meta(&path)?;
    println!(
        "saved step {} ({} history entries) to {}",
        meta.step,
        meta.history.len(),
        path.display()
    );
    let mut resumed = checkpoint::load(&path, Some(&arch))?;
    for want in &reference[10..] {
        let got = train_stage1_step(&mut resumed, d, &cfg)?;
        println!("{got}");
        assert_eq!(&got, want, "resumed stream diverged");
    }
    println!("resumed steps 11..20 match the uninterrupted run");
    std::fs::remove_file(path)?;
    Ok(())
}
