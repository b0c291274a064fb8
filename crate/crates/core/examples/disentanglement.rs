//! Stage 1 on the toy task, then a swap test: changing the appearance code
//! should move perceptual features far less than changing the content code.
//!
//! `cargo run --release --example disentanglement -- [steps] [seed]`

use fewshot_gan::data::Domain;
use fewshot_gan::eval::emit_grid;
use fewshot_gan::experiment::{disentanglement_ratio, run_stage1, ToyProfile};
use fewshot_gan::nets::standard_normal;
use fewshot_gan::tensor::Array;
use rand::SeedableRng;

fn main() -> fewshot_gan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).map_or(2000, |s| s.parse().expect("steps"));
    let seed = args.get(2).map_or(0, |s| s.parse().expect("seed"));
    let profile = ToyProfile {
        stage1_steps: steps,
        ..ToyProfile::small()
    };
    let run = run_stage1(&profile, seed)?;
    let bundle = &run.state.bundle;
    let ratio = disentanglement_ratio(bundle, &run.task.dataset, 200, 1)?;
    println!("appearance/content perceptual change ratio: {ratio:.3}");

    // Rows share a content code, columns share an appearance code.
    let (rows, cols) = (6, 8);
    let arch = &bundle.arch;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let imgs: Vec<_> = (0..rows)
        .map(|k| &run.task.dataset.source_pool()[k])
        .collect();
    let content = bundle.encode_content_batch(&imgs)?.mean;
    let appearance = standard_normal(&[cols, arch.appearance_dim], &mut rng);
    let pick = |a: &Array<f32>, i: usize| a.select_rows(&[i]);
    let mut grid = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            grid.extend(bundle.generate_batch(
                &pick(&content, r),
                &pick(&appearance, c),
                Domain::Source,
            )?);
        }
    }
    emit_grid(
        &grid,
        rows,
        cols,
        std::path::Path::new("disentanglement.png"),
    )?;
    println!("wrote disentanglement.png");
    Ok(())
}
