//! Writes the synthetic outline-to-texture dataset and checks that every
//! target shares its source counterpart's silhouette.
//!
//! `cargo run --release --example make_toy -- [out_dir]`

use std::path::PathBuf;

use fewshot_gan::data::load_dataset;
use fewshot_gan::eval::emit_grid;
use fewshot_gan::toy::{iou, silhouette, write_toy};

fn main() -> fewshot_gan::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "toy_data".into())
        .into();
    let layout = write_toy(&out, 2000, 10, 200, 32, 0)?;
    let d = load_dataset(&layout.source_dir, &layout.target_dir, &layout.manifest, 32)?;
    println!(
        "{} source images, {} paired targets",
        d.n_source(),
        d.n_target()
    );

    for i in 0..d.n_target() {
        let (src, tar) = (d.paired_source(i)?, &d.target_pool()[i]);
        println!(
            "target {i}: paired with source {}, silhouette IoU {:.3}",
            d.kappa(i)?,
            iou(&silhouette(src), &silhouette(tar))
        );
    }
    let mut preview: Vec<_> = (0..d.n_target())
        .map(|i| d.paired_source(i).cloned())
        .collect::<Result<_, _>>()?;
    preview.extend(d.target_pool().iter().cloned());
    emit_grid(&preview, 2, d.n_target(), &out.join("pairs.png"))?;
    println!("wrote {}", out.join("pairs.png").display());
    Ok(())
}
