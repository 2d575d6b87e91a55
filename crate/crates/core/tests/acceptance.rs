//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The tests hold a shared lock so that their wall-clock budgets are measured
//! one at a time; the logistic study is run once and shared by 6, 7 and 9.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use itergauss::cli::{cmd_gaussian_sweep, cmd_logistic, Experiment, LogisticReplicate, RunConfig, StrategyName};
use itergauss::diagnostics::kl_gaussian_after_mf;
use itergauss::mfvi::{reverse_kl_estimate, reverse_kl_gradient};
use itergauss::rng::{normal_vec, stream, substream, RandomStream};
use itergauss::score_pca::{
    eig_sym, estimate_h, gaussian_projected_fi, pfi_lower_bound, sample_haar_matrix, sample_haar_rotation,
    select_rotation,
};
use itergauss::target::{make_mf_optimal_gaussian, make_paper_logistic, score_fd_mismatch, std_normal_log_density};
use itergauss::transforms::{pullback_log_density, pullback_score, AffineMap, RqSpline};
use itergauss::{CoordMap, TargetDistribution, TransportChain, TransportLayer};
use nalgebra::DMatrix;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, ok: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let pass = ok && elapsed <= limit;
    println!(
        "criterion {n}: {} — {detail} [{:.1}s, budget {}s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "criterion {n} failed: {detail} ({:.1}s)", elapsed.as_secs_f64());
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

fn random_symmetric(d: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

#[test]
fn criterion_1_gaussian_bound_equality() {
    let _g = serial();
    let t0 = Instant::now();
    let n = 100_000;
    let mut rng = stream(101);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..10 {
        let kappa = rng.random_range(2.0..10.0);
        let p = make_mf_optimal_gaussian(3, kappa, &mut rng);
        // Ĥ by direct accumulation, independently of the library estimator.
        let xs: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, 3)).collect();
        let hs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| p.score(x).iter().zip(x).map(|(s, v)| s + v).collect())
            .collect();
        let mut h = DMatrix::zeros(3, 3);
        for (x, hv) in xs.iter().zip(&hs) {
            for i in 0..3 {
                for j in 0..3 {
                    h[(i, j)] += 0.5 * (x[i] * hv[j] + x[j] * hv[i]);
                }
            }
        }
        h /= n as f64;
        let (r, _) = select_rotation(&eig_sym(&h).unwrap(), 1.0);
        let rm = r.to_dense();
        let bound = pfi_lower_bound(&h, &r);
        let exact = gaussian_projected_fi(&p.rotated(&rm));
        // delta-method standard error of Σ_i c_i², c_i = mean (r_iᵀx)(r_iᵀh)
        let c: Vec<f64> = (0..3).map(|i| (rm.row(i) * &h * rm.row(i).transpose())[(0, 0)]).collect();
        let infl: Vec<f64> = xs
            .iter()
            .zip(&hs)
            .map(|(x, hv)| {
                (0..3)
                    .map(|i| {
                        let rx: f64 = (0..3).map(|j| rm[(i, j)] * x[j]).sum();
                        let rh: f64 = (0..3).map(|j| rm[(i, j)] * hv[j]).sum();
                        2.0 * c[i] * (rx * rh - c[i])
                    })
                    .sum()
            })
            .collect();
        let se = mean_se(&infl).1;
        worst = worst.max((bound - exact).abs() / se);
        ok &= (bound - exact).abs() <= 3.0 * se;
    }
    // the library estimator agrees with the direct one on a shared stream
    let p = make_mf_optimal_gaussian(3, 4.0, &mut stream(7));
    let lib = estimate_h(&p, 1000, &mut stream(8));
    let mut s = stream(8);
    let mut h = DMatrix::zeros(3, 3);
    for _ in 0..1000 {
        let x = normal_vec(&mut s, 3);
        let hv: Vec<f64> = p.score(&x).iter().zip(&x).map(|(a, b)| a + b).collect();
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] += 0.5 * (x[i] * hv[j] + x[j] * hv[i]) / 1000.0;
            }
        }
    }
    ok &= (lib.matrix - h).abs().max() < 1e-12;
    report(1, ok, t0.elapsed(), Duration::from_secs(10), &format!("max |bound - exact| / SE = {worst:.2} over 10 targets"));
}

#[test]
fn criterion_2_eigenrotation_is_optimal() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = stream(202);
    let mut min_slack = f64::INFINITY;
    for t in 0..20 {
        let d = 2 + t % 5;
        let h = random_symmetric(d, &mut rng);
        let (r, _) = select_rotation(&eig_sym(&h).unwrap(), 1.0);
        let best = pfi_lower_bound(&h, &r);
        for _ in 0..200 {
            let q = sample_haar_rotation(d, &mut rng);
            min_slack = min_slack.min(best - pfi_lower_bound(&h, &q));
        }
    }
    report(2, min_slack >= -1e-10, t0.elapsed(), Duration::from_secs(5), &format!("min slack {min_slack:.3e}"));
}

#[test]
fn criterion_3_averaged_bound_is_exact() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = stream(303);
    let mut ok = true;
    let mut detail = Vec::new();
    for d in [2usize, 4, 8] {
        let h = random_symmetric(d, &mut rng);
        // Σν² = ‖H‖_F², Σν = tr H
        let expected = (2.0 * h.norm_squared() + h.trace().powi(2)) / (d as f64 + 2.0);
        let xs: Vec<f64> = (0..10_000).map(|_| pfi_lower_bound(&h, &sample_haar_rotation(d, &mut rng))).collect();
        let (m, se) = mean_se(&xs);
        ok &= (m - expected).abs() <= 3.0 * se;
        detail.push(format!("d={d}: {:.2} SE", (m - expected) / se));
    }
    report(3, ok, t0.elapsed(), Duration::from_secs(30), &detail.join(", "));
}

#[test]
fn criterion_4_gaussian_contraction() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = stream(404);
    let mut ok = true;
    let mut detail = Vec::new();
    for d in [2usize, 4, 8] {
        for kappa in [1.5, 4.0, 10.0] {
            let p = make_mf_optimal_gaussian(d, kappa, &mut rng);
            let sigma = p.covariance().clone();
            // KL(γ‖p) = ½(tr P - d - log det P) with unit-diagonal P
            let prec = p.precision();
            let l0 = 0.5 * (prec.trace() - d as f64 - prec.determinant().ln());
            let xs: Vec<f64> =
                (0..10_000).map(|_| kl_gaussian_after_mf(&sigma, &sample_haar_rotation(d, &mut rng))).collect();
            let (m, se) = mean_se(&xs);
            let bound = (1.0 - 2.0 / ((d as f64 + 2.0) * kappa * kappa)) * l0;
            ok &= m <= bound + 3.0 * se;
            detail.push(format!("({d},{kappa}) {:.3}", m / l0));
        }
    }
    report(4, ok, t0.elapsed(), Duration::from_secs(60), &format!("mean/L0: {}", detail.join(" ")));
}

#[test]
fn criterion_5_sweep_trend() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = RunConfig {
        experiment: Experiment::GaussianSweep,
        dims: vec![2, 4, 8, 16],
        kappas: vec![4.0],
        strategies: vec![StrategyName::Random, StrategyName::Pca],
        replicates: Some(30),
        seed: 5,
        ..RunConfig::default()
    };
    let rows = cmd_gaussian_sweep(&cfg, None).unwrap();
    let get = |d: usize, s: StrategyName| rows.iter().find(|r| r.d == d && r.strategy == s).unwrap().mean_iters;
    let random: Vec<f64> = [4, 8, 16].iter().map(|d| get(*d, StrategyName::Random)).collect();
    let increasing = random.windows(2).all(|w| w[0] < w[1]);
    let ratio_ok = [2, 4, 8, 16].iter().all(|d| get(*d, StrategyName::Pca) * 3.0 <= get(*d, StrategyName::Random));
    let pca2 = get(2, StrategyName::Pca);
    let summary: Vec<String> = [2, 4, 8, 16]
        .iter()
        .map(|d| format!("d={d} rand {:.1} pca {:.1}", get(*d, StrategyName::Random), get(*d, StrategyName::Pca)))
        .collect();
    report(5, increasing && ratio_ok && pca2 == 1.0, t0.elapsed(), Duration::from_secs(120), &summary.join("; "));
}

#[test]
fn criterion_8_numerical_bedrock() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = stream(808);
    let mut notes = Vec::new();

    // spline inverse roundtrip
    let (k, b) = (10, 8.0);
    let params: Vec<f64> = (0..3 * (3 * k - 1)).map(|_| rng.random_range(-1.5..1.5)).collect();
    let spline = RqSpline::from_params(3, k, b, params.clone());
    let mut rt: f64 = 0.0;
    for i in 0..3 {
        for j in 0..=2000 {
            let x = -10.0 + 20.0 * j as f64 / 2000.0;
            let (y, _) = spline.forward_coord(i, x);
            rt = rt.max((spline.inverse_coord(i, y).0 - x).abs());
        }
    }
    notes.push(format!("roundtrip {rt:.1e}"));
    let roundtrip_ok = rt <= 1e-8;

    // analytic gradients against central differences
    let close = |an: f64, fd: f64| (an - fd).abs() <= 1e-3 * an.abs().max(fd.abs()) || (an - fd).abs() <= 1e-7;
    let mut grads_ok = true;
    let eps = 1e-6;
    for &x in &[-7.0, -2.3, 0.4, 3.9, 7.5] {
        let g = spline.coord_grads(1, x);
        let off = 3 * k - 1;
        for p in 0..off {
            let mut pp = params.clone();
            pp[off + p] += eps;
            let up = RqSpline::from_params(3, k, b, pp.clone()).forward_coord(1, x);
            pp[off + p] -= 2.0 * eps;
            let dn = RqSpline::from_params(3, k, b, pp).forward_coord(1, x);
            grads_ok &= close(g.d_value[p], (up.0 - dn.0) / (2.0 * eps));
            grads_ok &= close(g.d_log_deriv[p], (up.1 - dn.1) / (2.0 * eps));
        }
        let (yu, lu) = spline.forward_coord(1, x + eps);
        let (yd, ld) = spline.forward_coord(1, x - eps);
        grads_ok &= close(g.log_deriv.exp(), (yu - yd) / (2.0 * eps));
        grads_ok &= close(g.dlogderiv_dx, (lu - ld) / (2.0 * eps));
    }
    let target = make_paper_logistic(&mut rng);
    let dirs: Vec<Vec<f64>> = (0..10).map(|_| normal_vec(&mut rng, 10)).collect();
    let at = normal_vec(&mut rng, 10);
    grads_ok &= score_fd_mismatch(&target, &at, &dirs, 1e-5) < 1e-3;

    let map_params: Vec<f64> = (0..10 * (3 * k - 1)).map(|_| rng.random_range(-0.5..0.5)).collect();
    let map = CoordMap::Spline(RqSpline::from_params(10, k, b, map_params.clone()));
    let batch: Vec<Vec<f64>> = (0..50).map(|_| normal_vec(&mut rng, 10)).collect();
    let (_, grad) = reverse_kl_gradient(&map, &target, &batch).unwrap();
    for p in (0..map_params.len()).step_by(7) {
        let mut pp = map_params.clone();
        pp[p] += eps;
        let up = reverse_kl_estimate(&CoordMap::Spline(RqSpline::from_params(10, k, b, pp.clone())), &target, &batch).unwrap();
        pp[p] -= 2.0 * eps;
        let dn = reverse_kl_estimate(&CoordMap::Spline(RqSpline::from_params(10, k, b, pp)), &target, &batch).unwrap();
        grads_ok &= close(grad[p], (up.value - dn.value) / (2.0 * eps));
    }

    let chain = TransportChain::from_layers(
        3,
        vec![
            TransportLayer::new(
                sample_haar_rotation(3, &mut rng),
                CoordMap::Affine(AffineMap::new(vec![0.1, -0.2, 0.3], vec![0.2, -0.1, 0.05])),
            ),
            TransportLayer::new(sample_haar_rotation(3, &mut rng), CoordMap::Spline(spline.clone())),
        ],
    );
    let base = make_mf_optimal_gaussian(3, 3.0, &mut rng);
    let y = [0.3, -0.7, 1.1];
    let s = pullback_score(&chain, &base, &y);
    for i in 0..3 {
        let (mut yp, mut ym) = (y, y);
        yp[i] += eps;
        ym[i] -= eps;
        let fd = (pullback_log_density(&chain, &base, &yp) - pullback_log_density(&chain, &base, &ym)) / (2.0 * eps);
        grads_ok &= close(s[i], fd);
    }
    notes.push(format!("gradients {}", if grads_ok { "ok" } else { "MISMATCH" }));

    // Haar fourth moments, d = 4
    let d = 4.0;
    let n = 100_000;
    let mut m = [vec![], vec![], vec![], vec![]];
    for _ in 0..n {
        let q = sample_haar_matrix(4, &mut rng);
        m[0].push(q[(0, 0)].powi(4));
        m[1].push(q[(0, 0)].powi(2) * q[(0, 1)].powi(2));
        m[2].push(q[(0, 0)].powi(2) * q[(1, 1)].powi(2));
        m[3].push(q[(0, 0)] * q[(0, 1)] * q[(1, 0)] * q[(1, 1)]);
    }
    let exact = [
        3.0 / (d * (d + 2.0)),
        1.0 / (d * (d + 2.0)),
        (d + 1.0) / ((d - 1.0) * d * (d + 2.0)),
        -1.0 / ((d - 1.0) * d * (d + 2.0)),
    ];
    let z: Vec<f64> = m.iter().zip(exact).map(|(xs, e)| {
        let (mu, se) = mean_se(xs);
        (mu - e) / se
    }).collect();
    let moments_ok = z.iter().all(|v| v.abs() <= 3.0);
    notes.push(format!("haar z {:?}", z.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()));

    // Jacobi reconstruction
    let mut recon: f64 = 0.0;
    for t in 0..50 {
        let dd = 2 + t % 11;
        let h = random_symmetric(dd, &mut rng) * 3.0;
        let e = eig_sym(&h).unwrap();
        let back = &e.vectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(e.values.clone())) * e.vectors.transpose();
        recon = recon.max((back - &h).abs().max());
    }
    notes.push(format!("jacobi {recon:.1e}"));
    let ok = roundtrip_ok && grads_ok && moments_ok && recon <= 1e-10;
    report(8, ok, t0.elapsed(), Duration::from_secs(60), &notes.join(", "));
}

// ---- logistic study, shared by 6, 7 and 9 ----

struct Study {
    reps: Vec<LogisticReplicate>,
    elapsed: Duration,
    dir: tempfile::TempDir,
}

fn logistic_config() -> RunConfig {
    RunConfig { experiment: Experiment::Logistic, seed: 2024, ..RunConfig::default() }
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let t0 = Instant::now();
        let reps = cmd_logistic(&logistic_config(), Some(dir.path())).unwrap();
        Study { reps, elapsed: t0.elapsed(), dir }
    })
}

fn record<'a>(rep: &'a LogisticReplicate, suffix: &str) -> Option<&'a itergauss::diagnostics::MetricsRecord> {
    rep.records.iter().find(|r| r.run_id.ends_with(suffix) && r.status == "ok")
}

#[test]
fn criterion_6_stochastic_monotonicity() {
    let _g = serial();
    let s = study();
    let t0 = Instant::now();
    let mut good = 0;
    let mut worst = Vec::new();
    for rep in &s.reps {
        let Some((_, run)) = rep.runs.iter().find(|(id, _)| id.ends_with("-R7")) else { continue };
        let offset = run.records().iter().filter(|r| r.kind == "laplace").count();
        let base = run.base();
        // common random numbers: one batch for every k
        let mut rng = substream(rep.seed, 99);
        let z: Vec<Vec<f64>> = (0..2000).map(|_| normal_vec(&mut rng, 10)).collect();
        let terms: Vec<Vec<f64>> = (1..=5)
            .map(|k| {
                let c = run.chain().prefix(offset + k);
                z.iter()
                    .map(|z| {
                        let (x, ld) = c.push_forward(z);
                        std_normal_log_density(z) - ld - base.log_density(&x)
                    })
                    .collect()
            })
            .collect();
        let mut ok = true;
        let mut w = f64::NEG_INFINITY;
        for k in 0..4 {
            let diff: Vec<f64> = terms[k + 1].iter().zip(&terms[k]).map(|(a, b)| a - b).collect();
            let (m, se) = mean_se(&diff);
            ok &= m <= 3.0 * se;
            w = w.max(m / se);
        }
        worst.push(w);
        good += ok as usize;
    }
    let elapsed = s.elapsed + t0.elapsed();
    let detail = format!(
        "{good}/20 replicates monotone; worst step increase per replicate (SE units): {:?}",
        worst.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>()
    );
    report(6, good >= 18, elapsed, Duration::from_secs(600), &detail);
}

#[test]
fn criterion_7_logistic_reproduction() {
    let _g = serial();
    let s = study();
    let t0 = Instant::now();
    let mut wins = 0;
    for rep in &s.reps {
        if let (Some(p), Some(i)) = (record(rep, "-pca"), record(rep, "-identity")) {
            wins += (p.mmd < i.mmd && -p.elbo < -i.elbo) as usize;
        }
    }
    let mean_mmd = |suffix: &str| {
        let v: Vec<f64> = s.reps.iter().filter_map(|r| record(r, suffix)).map(|r| r.mmd).collect();
        (v.iter().sum::<f64>() / v.len() as f64, v.len())
    };
    let rk: Vec<(f64, usize)> = ["-R3", "-R5", "-R7"].iter().map(|s| mean_mmd(s)).collect();
    let monotone = rk.windows(2).all(|w| w[1].0 < w[0].0) && rk.iter().all(|(_, n)| *n == s.reps.len());
    let elapsed = s.elapsed + t0.elapsed();
    let detail = format!(
        "PCA beats identity on MMD and -ELBO in {wins}/20; mean MMD R3 {:.4} R5 {:.4} R7 {:.4}",
        rk[0].0, rk[1].0, rk[2].0
    );
    report(7, wins >= 16 && monotone, elapsed, Duration::from_secs(1200), &detail);
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let s = study();
    let t0 = Instant::now();
    let again = tempfile::tempdir().unwrap();
    cmd_logistic(&logistic_config(), Some(again.path())).unwrap();
    let (a, b) = (read_tree(s.dir.path()), read_tree(again.path()));
    let chains = a.keys().filter(|k| k.starts_with("chains")).count();
    let same = a == b && a.contains_key("metrics.csv") && chains > 0;
    report(9, same, t0.elapsed(), Duration::from_secs(1200), &format!("{} files compared ({chains} chains)", a.len()));
}
