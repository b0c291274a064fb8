//! The whole method on the toy task: one stage-1 model, then stage 2 with and
//! without the relation and adversarial terms, against a target-only GAN.
//! Prints held-out FID for both synthesis manners.
//!
//! `cargo run --release --example few_shot_pipeline -- [seed] [n_target]`

use fewshot_gan::eval::{emit_grid, synthesize, SynthesisManner};
use fewshot_gan::experiment::{
    heldout_fid, metric_extractor, run_baseline, run_stage1, run_stage2, ToyProfile,
};
use fewshot_gan::train::Ablation;

fn main() -> fewshot_gan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    let n_target = args.get(2).map_or(10, |s| s.parse().expect("n_target"));
    let profile = ToyProfile::small();
    let extractor = metric_extractor(&profile);
    let base = run_stage1(&profile, seed)?;
    let reference = &base.task.eval_targets;

    println!("{:<28} {:>9} {:>9}", "model", "FID rand", "FID syn");
    let baseline = run_baseline(&profile, &base, n_target)?;
    let fid = heldout_fid(
        &profile,
        &baseline.sampling_bundle(),
        SynthesisManner::Rand,
        None,
        reference,
        &extractor,
    )?;
    println!("{:<28} {fid:>9.4} {:>9}", "target-only GAN", "-");

    for ablation in [
        Ablation::FULL,
        Ablation::NO_RELATION,
        Ablation::NO_RELATION_NO_ADVERSARIAL,
    ] {
        let run = run_stage2(&profile, &base, n_target, ablation)?;
        let bundle = &run.state.sampling_bundle();
        let d = Some(&run.dataset);
        let rand = heldout_fid(
            &profile,
            bundle,
            SynthesisManner::Rand,
            d,
            reference,
            &extractor,
        )?;
        let syn = heldout_fid(
            &profile,
            bundle,
            SynthesisManner::Syn,
            d,
            reference,
            &extractor,
        )?;
        println!("{:<28} {rand:>9.4} {syn:>9.4}", ablation.label());
        if ablation == Ablation::FULL {
            let samples = synthesize(bundle, SynthesisManner::Syn, 64, 1, d)?;
            emit_grid(&samples, 8, 8, std::path::Path::new("pipeline_syn.png"))?;
        }
    }
    println!("wrote pipeline_syn.png");
    Ok(())
}
