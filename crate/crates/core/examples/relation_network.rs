//! Fits the relation network to predict content distances of unpaired
//! cross-domain pairs from a stage-1 content encoder.
//!
//! `cargo run --release --example relation_network -- [stage1_steps] [relation_steps]`

use fewshot_gan::experiment::{run_stage1, ToyProfile};
use fewshot_gan::losses::content_distance;
use fewshot_gan::train::{train_relation, Ablation};

fn main() -> fewshot_gan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let s1 = args
        .get(1)
        .map_or(1000, |s| s.parse().expect("stage1 steps"));
    let rel = args
        .get(2)
        .map_or(500, |s| s.parse().expect("relation steps"));
    let profile = ToyProfile {
        stage1_steps: s1,
        relation_steps: rel,
        ..ToyProfile::small()
    };
    let run = run_stage1(&profile, 0)?;
    let d = run.task.dataset.with_target_subset(10)?;
    let cfg = profile.config(0, Ablation::FULL);
    let mut state = run.state.clone();
    let fit = train_relation(&mut state, &d, &cfg, rel, |r| {
        if r.step % 100 == 0 {
            println!("{r}");
        }
    })?;
    println!(
        "probe: mean |R - D_c| = {:.3}, mean D_c = {:.3} ({:.1}%)",
        fit.mean_abs_error,
        fit.mean_distance,
        100.0 * fit.relative_error()
    );

    let bundle = &state.bundle;
    println!("source  target  D_c     R");
    for j in 0..4 {
        for i in 0..3 {
            let src = &d.source_pool()[j];
            let dc = content_distance(bundle, src, i, &d)?;
            let r = bundle.relation_score(src, &d.target_pool()[i])?;
            println!("{j:6}  {i:6}  {dc:6.3}  {:6.3}", r.0);
        }
    }
    Ok(())
}
