//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use gazeprompt::anchors::{
    geo_loss, geo_loss_with_target, spherical_bilinear_weights_at, AnchorGrid, AnchorSet, InterpolationScheme,
};
use gazeprompt::geometry::{angular_error, slerp_weights, yawpitch_to_vec, GazeVector, YawPitch};
use gazeprompt::gradcheck::{run_gradcheck, GradTarget, DEFAULT_CONFIGS, FD_TOLERANCE};
use gazeprompt::harness::{
    ablation_variants, feature_label_correlation, mean_std, run_replicates, AblationAxis, Dataset, ReplicateOutcome,
    TrainConfig,
};
use gazeprompt::linalg::Matrix;
use gazeprompt::losses::{mcr_i2t_loss, mcr_t2i_loss, WeightingScheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::process::{Command, ExitCode};
use std::time::Instant;

const SEEDS: u64 = 5;
const SPEARMAN_PAIRS: usize = 5000;
const TABLE_BUDGET_SECS: f64 = 15.0 * 60.0;
const GRADIENT_BUDGET_SECS: f64 = 60.0;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let report = match run_gradcheck(GradTarget::All, 0, DEFAULT_CONFIGS) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<&str> = report.rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    verdict(
        report.passed() && secs < GRADIENT_BUDGET_SECS,
        format!(
            "{} checks x {DEFAULT_CONFIGS} configs, worst relative error {:.2e} (< {FD_TOLERANCE:e}), {secs:.1}s (< {GRADIENT_BUDGET_SECS}s){}",
            report.rows.len(),
            report.worst(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
        ),
    )
}

fn interpolation_exactness() -> Verdict {
    let grid = AnchorGrid::new(30.0, 30.0).unwrap();
    let mut corner_err: f64 = 0.0;
    for (i, yp) in grid.positions().iter().enumerate() {
        let w = spherical_bilinear_weights_at(*yp, &grid).unwrap();
        corner_err = corner_err.max((w.weight_of(i) - 1.0).abs());
        let r = w.reconstruct(grid.gazes()).unwrap().as_array();
        let g = grid.gazes()[i].as_array();
        corner_err = corner_err.max((0..3).map(|k| (r[k] - g[k]).abs()).fold(0.0, f64::max));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut slerp_err: f64 = 0.0;
    let mut triples = 0;
    while triples < 1000 {
        let a = random_unit(&mut rng);
        let b = random_unit(&mut rng);
        let (g1, g2) = (GazeVector::normalize(a).unwrap(), GazeVector::normalize(b).unwrap());
        let theta = g1.arc_to(&g2);
        if !(1e-3..std::f64::consts::PI - 1e-3).contains(&theta) {
            continue;
        }
        // point at fraction t of the arc, built from the tangent at g1
        let c = g1.dot(&g2);
        let tan = {
            let t = [0, 1, 2].map(|k| b[k] - c * a[k]);
            let n = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            t.map(|x| x / n)
        };
        let t: f64 = rng.gen();
        let (s, co) = (t * theta).sin_cos();
        let gi = [0, 1, 2].map(|k| co * a[k] + s * tan[k]);
        let (w1, w2) = slerp_weights(&g1, &g2, &GazeVector::normalize(gi).unwrap()).unwrap();
        for k in 0..3 {
            slerp_err = slerp_err.max((w1 * a[k] + w2 * b[k] - gi[k]).abs());
        }
        triples += 1;
    }

    // bound from a dense scan of every cell, then random in-cell targets
    let recon = |yaw: f64, pitch: f64| {
        let yp = YawPitch::new(yaw, pitch).unwrap();
        let w = spherical_bilinear_weights_at(yp, &grid).unwrap();
        angular_error(&w.reconstruct(grid.gazes()).unwrap(), &yawpitch_to_vec(yp).unwrap())
    };
    let mut scan: f64 = 0.0;
    for i in 0..=360 {
        for j in 0..=180 {
            scan = scan.max(recon(-180.0 + i as f64, -90.0 + j as f64));
        }
    }
    let mut random: f64 = 0.0;
    for _ in 0..1000 {
        random = random.max(recon(rng.gen_range(-180.0..=180.0), rng.gen_range(-90.0..=90.0)));
    }
    verdict(
        corner_err < 1e-9 && slerp_err < 1e-9 && scan < 1.0 && random < 1.0,
        format!(
            "corners {corner_err:.1e}, slerp triples {slerp_err:.1e} (< 1e-9); reconstruction worst {random:.3}° random / {scan:.3}° dense scan (< 1°)"
        ),
    )
}

fn info_nce(anchor: &[Vec<f64>], partner: &[Vec<f64>]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let b = anchor.len();
    (0..b)
        .map(|i| {
            let denom: f64 = (0..b).map(|j| cos(&anchor[i], &partner[j]).exp()).sum();
            -(cos(&anchor[i], &partner[i]).exp() / denom).ln()
        })
        .sum::<f64>()
        / b as f64
}

fn loss_exactness() -> Verdict {
    let g = |x: f64, y: f64, z: f64| GazeVector::normalize([x, y, z]).unwrap();
    let front = g(0.0, 0.0, 1.0);
    let mut worst: f64 = 0.0;

    let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let (zero, _) = mcr_t2i_loss(&f, &f, &[front, g(1.0, 0.0, 0.0)], WeightingScheme::LiteralCos, 1.0).unwrap();
    worst = worst.max(zero.abs());

    let same = vec![vec![1.0, 0.0, 0.0]; 2];
    let (two, _) = mcr_t2i_loss(&same, &same, &[front; 2], WeightingScheme::Uniform, 1.0).unwrap();
    worst = worst.max((two - 2f64.ln()).abs());

    let one = vec![vec![0.0, 2.0]];
    let bank = vec![vec![0.0, 1.0], vec![0.0, 3.0]];
    let (three, _) =
        mcr_i2t_loss(&one, &one, &[front], &bank, &[front, front], WeightingScheme::LiteralCos, 1.0).unwrap();
    worst = worst.max((three - 3f64.ln()).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut nce: f64 = 0.0;
    let empty: [Vec<f64>; 0] = [];
    for _ in 0..100 {
        let mut feats = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..16).map(|_| rng.sample(StandardNormal)).collect()).collect()
        };
        let (text, image) = (feats(8), feats(8));
        let labels: Vec<GazeVector> = (0..8).map(|_| GazeVector::normalize(random_unit(&mut rng)).unwrap()).collect();
        let (t2i, _) = mcr_t2i_loss(&text, &image, &labels, WeightingScheme::Uniform, 1.0).unwrap();
        let (i2t, _) = mcr_i2t_loss(&image, &text, &labels, &empty, &[], WeightingScheme::Uniform, 1.0).unwrap();
        nce = nce.max((t2i - info_nce(&text, &image)).abs());
        nce = nce.max((i2t - info_nce(&image, &text)).abs());
    }
    verdict(
        worst < 1e-12 && nce < 1e-12,
        format!("closed forms (0, log 2, log 3) off by {worst:.1e}; InfoNCE on 100 B=8 batches off by {nce:.1e} (< 1e-12)"),
    )
}

/// Replicate runs of one named variant.
struct Runs {
    name: String,
    runs: Vec<ReplicateOutcome>,
}

impl Runs {
    fn target_errors(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.target_error).collect()
    }

    fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.target_errors())
    }
}

fn pooled_std(a: &Runs, b: &Runs) -> f64 {
    let (_, sa) = a.mean_std();
    let (_, sb) = b.mean_std();
    ((sa * sa + sb * sb) / 2.0).sqrt()
}

fn table_line(rows: &[&Runs]) -> String {
    rows.iter()
        .map(|r| {
            let (m, s) = r.mean_std();
            format!("{} {m:.3}±{s:.3}", r.name)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// `later` is no worse than `earlier` within one pooled standard deviation.
fn within_pooled(later: &Runs, earlier: &Runs) -> bool {
    later.mean_std().0 <= earlier.mean_std().0 + pooled_std(later, earlier)
}

struct Tables {
    loss: Vec<Runs>,
    negatives: Vec<Runs>,
    interpolation: Vec<Runs>,
    target: Dataset,
    config: TrainConfig,
    seconds: f64,
}

fn run_tables() -> Tables {
    let start = Instant::now();
    let base = TrainConfig::default();
    let (source, target) = base.datasets().unwrap();
    let train = |name: String, config: &TrainConfig| {
        let runs = run_replicates(config, SEEDS, &source, &target, |r| {
            eprintln!("  {name:<20} seed {}  tgt {:.3}°", r.replicate, r.target_error);
        })
        .unwrap();
        Runs { name, runs }
    };

    let loss: Vec<Runs> = ablation_variants(AblationAxis::LossTerms, &base, &[])
        .into_iter()
        .map(|v| train(v.name, &v.config))
        .collect();
    let full = &loss[2];

    // the full objective already is K = 256 with spherical-bilinear weights
    let mut negatives = Vec::new();
    for v in ablation_variants(AblationAxis::NegativeCount, &base, &[0, 64, 256]) {
        if v.config.negatives == base.negatives {
            negatives.push(Runs { name: v.name, runs: clone_runs(&full.runs) });
        } else {
            negatives.push(train(v.name, &v.config));
        }
    }
    let mut interpolation = Vec::new();
    for v in ablation_variants(AblationAxis::Interpolation, &base, &[]) {
        if v.config.interpolation == base.interpolation {
            interpolation.push(Runs { name: v.name, runs: clone_runs(&full.runs) });
        } else {
            interpolation.push(train(v.name, &v.config));
        }
    }
    Tables {
        loss,
        negatives,
        interpolation,
        target,
        config: base,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn clone_runs(runs: &[ReplicateOutcome]) -> Vec<ReplicateOutcome> {
    runs.iter()
        .map(|r| ReplicateOutcome {
            replicate: r.replicate,
            source_error: r.source_error,
            target_error: r.target_error,
            params: r.params.clone(),
        })
        .collect()
}

fn loss_table(t: &Tables) -> Verdict {
    let [gaze, mcr, full] = [&t.loss[0], &t.loss[1], &t.loss[2]];
    let (eg, em, ef) = (gaze.mean_std().0, mcr.mean_std().0, full.mean_std().0);
    let reduction = 1.0 - ef / eg;
    verdict(
        eg > em && em > ef && reduction >= 0.10 && t.seconds < TABLE_BUDGET_SECS,
        format!(
            "{}; full vs gaze-only {:+.1}% (need <= -10%); table runs {:.0}s (< {TABLE_BUDGET_SECS}s)",
            table_line(&[gaze, mcr, full]),
            -100.0 * reduction,
            t.seconds
        ),
    )
}

fn negatives_table(t: &Tables) -> Verdict {
    let ok = t.negatives.windows(2).all(|w| within_pooled(&w[1], &w[0]));
    verdict(ok, table_line(&t.negatives.iter().collect::<Vec<_>>()))
}

fn interpolation_table(t: &Tables) -> Verdict {
    let find = |s: InterpolationScheme| t.interpolation.iter().find(|r| r.name == s.name()).unwrap();
    let global = find(InterpolationScheme::GlobalLinear);
    let planar = find(InterpolationScheme::PlanarBilinear);
    let spherical = find(InterpolationScheme::SphericalBilinear);
    verdict(
        within_pooled(spherical, planar) && within_pooled(planar, global),
        table_line(&[spherical, planar, global]),
    )
}

fn spearman_gain(t: &Tables) -> Verdict {
    let rho = |runs: &Runs| {
        let values: Vec<f64> = runs
            .runs
            .iter()
            .map(|r| feature_label_correlation(&r.params, &t.target, SPEARMAN_PAIRS, t.config.seeds.pairs).unwrap())
            .collect();
        mean_std(&values).0
    };
    let (gaze, full) = (rho(&t.loss[0]), rho(&t.loss[2]));
    verdict(
        full - gaze >= 0.1,
        format!("rho gaze-only {gaze:.3}, full {full:.3}, gain {:+.3} (need >= 0.1)", full - gaze),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_gazeprompt"))
            .env_remove("GAZEPROMPT_SEED")
            .args(["train", "--out-dir", out.to_str().unwrap()])
            .output()
            .unwrap();
        if !status.status.success() {
            return verdict(false, format!("train failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outputs.push((
            std::fs::read(out.join("metrics.csv")).unwrap(),
            std::fs::read(out.join("checkpoint.json")).unwrap(),
        ));
    }
    let rows = String::from_utf8_lossy(&outputs[0].0).lines().count() - 1;
    verdict(
        outputs[0] == outputs[1],
        format!(
            "two default train runs: metrics.csv ({rows} rows) {}, checkpoint {}",
            if outputs[0].0 == outputs[1].0 { "identical" } else { "differ" },
            if outputs[0].1 == outputs[1].1 { "identical" } else { "differ" },
        ),
    )
}

fn geo_zero_case() -> Verdict {
    let grid = AnchorGrid::new(30.0, 30.0).unwrap();
    let rows: Vec<Vec<f64>> = grid.gazes().iter().map(|g| g.as_array().to_vec()).collect();
    let set = AnchorSet::from_parts(grid, Matrix::from_rows(&rows).unwrap()).unwrap();
    let (zero, _) = geo_loss(&set).unwrap();
    let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
    let (half, _) = geo_loss_with_target(&emb, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    verdict(zero == 0.0 && half == 0.5, format!("embeddings = gazes: {zero}; N = 2 hand case: {half}"))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("{} {n} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "interpolation exactness", interpolation_exactness());
    report(3, "loss exactness", loss_exactness());
    let tables = run_tables();
    report(4, "loss-term ablation trend", loss_table(&tables));
    report(5, "negative-count trend", negatives_table(&tables));
    report(6, "interpolation trend", interpolation_table(&tables));
    report(7, "feature/label rank correlation gain", spearman_gain(&tables));
    report(8, "determinism", determinism());
    report(9, "geo-loss zero case", geo_zero_case());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
