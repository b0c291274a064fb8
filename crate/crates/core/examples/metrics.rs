//! FID and KID between image pools with a fixed random-conv feature
//! extractor, plus a TSV report in the evaluation format.
//!
//! `cargo run --release --example metrics`

use fewshot_gan::data::augment_target_pool;
use fewshot_gan::eval::{evaluate, fid_of, write_report, ReferenceKind, SynthesisManner};
use fewshot_gan::nets::ConvFeatureExtractor;
use fewshot_gan::toy::ToyTask;

fn main() -> fewshot_gan::Result<()> {
    let task = ToyTask::generate(1000, 100, 1000, 16, 0)?;
    let extractor = ConvFeatureExtractor::metric(0xE7A1);
    let heldout = &task.eval_targets;
    let (a, b) = heldout.split_at(500);
    let targets = task.dataset.target_pool();
    let sources = &task.dataset.source_pool()[..500];
    let few = task.dataset.with_target_subset(10)?;
    let augmented = augment_target_pool(&few, &Default::default(), 0)?;

    println!("FID against 500 held-out targets:");
    println!("  other held-out half   {:.4}", fid_of(a, b, &extractor)?);
    println!(
        "  100 training targets  {:.4}",
        fid_of(targets, b, &extractor)?
    );
    println!(
        "  10 targets augmented  {:.4}",
        fid_of(&augmented, b, &extractor)?
    );
    println!(
        "  source outlines       {:.4}",
        fid_of(sources, b, &extractor)?
    );

    let rows = evaluate(
        sources,
        heldout,
        &extractor,
        SynthesisManner::Rand,
        0,
        ReferenceKind::Heldout,
    )?;
    write_report(&rows, std::path::Path::new("metrics.tsv"))?;
    for r in &rows {
        println!("{}\t{:.6}", r.metric, r.value);
    }
    println!("wrote metrics.tsv");
    Ok(())
}
