use std::path::PathBuf;

use mora::model::Method;
use mora_harness::{cmd_train, ExperimentConfig};

#[allow(clippy::too_many_arguments)]
fn base_config(
    s_img: f64,
    s_txt: f64,
    noise: f64,
    n: usize,
    rank: usize,
    patience: usize,
    max_epochs: usize,
    projs: &str,
    d: usize,
) -> ExperimentConfig {
    let json = format!(
        r#"{{
        "model": {{
            "hidden_dim": {d}, "num_blocks": 2, "num_heads": 4, "mlp_ratio": 2,
            "vocab_size": 64, "max_text_len": 8, "image_grid": 4, "patch_dim": 8,
            "num_labels": 4
        }},
        "adapter": {{ "rank": {rank}, "target_projections": {projs} }},
        "train": {{ "patience": {patience}, "max_epochs": {max_epochs} }},
        "task": {{
            "num_labels": 4, "prevalence": [0.5, 0.45, 0.4, 0.35],
            "image_signal": {s_img}, "text_signal": {s_txt}, "noise": {noise},
            "vocab_size": 64, "seed": 0
        }},
        "missing": {{
            "train": {{ "avail_img": 0.65, "avail_txt": 0.65 }},
            "test": [
                {{ "avail_img": 1.0, "avail_txt": 1.0 }},
                {{ "avail_img": 0.8, "avail_txt": 0.8 }},
                {{ "avail_img": 0.6, "avail_txt": 0.6 }}
            ]
        }},
        "seeds": [1, 2, 3],
        "num_samples": {n},
        "split": [0.5, 0.25, 0.25]
    }}"#
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, json).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let s_img: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.8);
    let s_txt: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3.0);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(400);
    let rank: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);
    let patience: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(5);
    let max_epochs: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(40);
    let d: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(32);
    let projs = match args.get(8).map(String::as_str) {
        Some("value") => r#"["value"]"#,
        Some("query") => r#"["query"]"#,
        _ => r#"["query", "value"]"#,
    };

    println!(
        "s_img={s_img} s_txt={s_txt} noise={noise} n={n} rank={rank} patience={patience} epochs={max_epochs} projs={projs} d={d}"
    );

    for method in [Method::Mora, Method::Lora, Method::None] {
        let mut cfg = base_config(s_img, s_txt, noise, n, rank, patience, max_epochs, projs, d);
        cfg.method = method;
        let dir = tempfile::tempdir().unwrap();
        let t0 = std::time::Instant::now();
        let report = cmd_train(&cfg, &PathBuf::from(dir.path())).unwrap();
        print!("{:<5} ({:>5.1}s):", method.to_string(), t0.elapsed().as_secs_f64());
        for s in &report.summary {
            let eta = 2.0 - s.test_avail_img - s.test_avail_txt;
            print!("  eta={eta:.1}: {:.4}+/-{:.3}", s.mean_f1, s.std_f1);
        }
        println!();
    }
}
