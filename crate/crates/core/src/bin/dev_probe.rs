use mocapfit::autodiff::LossOptions;
use mocapfit::fitting::*;
use mocapfit::losses::LossWeights;
use mocapfit::mesh::BlendshapeModel;
use mocapfit::scenegen::{sample_scene, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let model = BlendshapeModel::desk_default();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-6);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let wk: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let wm: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let ws: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let t0 = std::time::Instant::now();
    let mut reductions = Vec::new();
    for seed in 0..20u64 {
        let spec = SceneSpec { seed: 100 + seed, ..SceneSpec::default() };
        let scene = sample_scene(&model, &spec).unwrap();
        let prepared = scene.prepared().unwrap();
        let truth_pv = scene.truth_vector().unwrap();
        let truth_geom = TruthGeometry::from_scene(&scene);
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let mut init = truth_pv.clone();
        for v in init.data.iter_mut() {
            let g: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
            *v += args.get(11).map(|s| s.parse().unwrap()).unwrap_or(0.05) * g;
        }
        let start = metrics_against_truth(&model, &init, &truth_geom).unwrap();
        let polish = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(iters + 1);
        let cfg = FitConfig {
            learning_rate: lr,
            iterations: iters,
            schedule: vec![
                (0, LossWeights { kpt: wk, motion: wm, seg: ws }),
                (polish, LossWeights { kpt: args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1.0), motion: args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.0), seg: args.get(10).map(|s| s.parse().unwrap()).unwrap_or(0.0) }),
            ],
            base: LossOptions {
                seg_mode: if args.get(8).map(|s| s == "chamfer").unwrap_or(false) {
                    mocapfit::losses::SegMode::Chamfer
                } else {
                    mocapfit::losses::SegMode::Projected
                },
                ..LossOptions::default()
            },
            ..FitConfig::default()
        };
        match fit_direct(&model, &prepared, &init, &cfg, Some(&truth_geom)) {
            Ok(report) => {
                let end = report.final_metrics().unwrap();
                let red = 1.0 - end.surface_mm / start.surface_mm;
                reductions.push(red);
                let mut blocks = String::new();
                for (name, range) in truth_pv.layout.blocks() {
                    let mut worst = 0.0f64;
                    for i in range {
                        worst = worst.max((report.final_params.data[i] - truth_pv.data[i]).abs());
                    }
                    blocks.push_str(&format!(" {name}={worst:.4}"));
                }
                println!(
                    "seed {seed}: surf {:.2} -> {:.2} mm ({:.1}% red) loss {:.3e} |{blocks}",
                    start.surface_mm, end.surface_mm, 100.0 * red, report.final_loss()
                );
            }
            Err(e) => {
                reductions.push(-1.0);
                println!("seed {seed}: DIVERGED/{e}");
            }
        }
    }
    let ok = reductions.iter().filter(|r| **r >= 0.9).count();
    println!("=== >=90% reduction in {ok}/20 runs, wall {:?}", t0.elapsed());
}
