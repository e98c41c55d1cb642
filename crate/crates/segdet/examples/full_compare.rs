//! Miniature end-to-end run of the three compared systems (plain 3D U-Net,
//! 3D-mask baseline, detection-driven attention) on a small phantom set.
//! Short iteration counts keep this to a couple of minutes; the acceptance
//! suite runs the full-size version.
//!
//!     cargo run --example full_compare

use segdet::metrics::comparison_table;
use segdet::pipeline::{cmd_compare, cmd_gen_data, PipelineConfig};

fn main() {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 1;
    cfg.data.n_train = 4;
    cfg.data.n_test = 3;
    cfg.rpn_iters = 800;
    cfg.seg.iters = 150;
    cfg.checkpoint_every = 75;

    let dir = std::env::temp_dir().join("segdet_full_compare");
    let data = dir.join("data");
    let run = dir.join("run");
    cmd_gen_data(&cfg, &data).unwrap();
    println!("data under {}", data.display());

    let reports = cmd_compare(&cfg, &data.join("manifest.tsv"), &run).unwrap();
    println!("\n{}", comparison_table(&reports));
    println!("checkpoints, loss curves and reports under {}", run.display());
}
