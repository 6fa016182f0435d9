//! End-to-end acceptance suite. One test per criterion, each ending in a
//! single PASS line (or SKIP for the optional public-data path). The two
//! expensive fixtures, a round-trip world with region-pure mixing and an
//! ordering world with smooth mixing, are built once and shared.

use std::sync::OnceLock;
use std::time::Instant;

use blimp_core::aero::{acm_wrench, gdm_wrench};
use blimp_core::dataio::{
    format_trajectory, load_dir, mirror_trajectory, parse_trajectory, partition_dataset,
    save_trajectory, split, RegionPools, SplitSpec, TrajectoryRecord,
};
use blimp_core::dynamics::{
    hybrid_derivative, rollout, step_with_lambda, MassFactor, MixingMode, RegimePartition,
    StateVector,
};
use blimp_core::ident::{
    evaluate, extract_steady_samples, gradient_check, lambda_mae, loss_gradient,
    parameter_sensitivity, prediction_loss, three_phase_train, threshold_scan, FitReport, Horizon,
    LossConfig, Phase, SteadySample,
};
use blimp_core::mathcore::{
    euler_rate_map, rk4_step, rotation_body_to_inertial, skew, EulerAngles, MathError,
};
use blimp_core::mixer::{anchor_means, mono_loss, MixerParams, MonoSign, RegGrids};
use blimp_core::rigidbody::{added_mass_terms, coriolis_matrix, ControlInput, PhysicalParams};
use blimp_core::synth::{
    config_grid, generate_dataset, ground_truth, true_lambda, SynthSpec,
};
use blimp_core::{Vec3, Vec6};
use nalgebra::{Matrix3, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RATE: f64 = 60.0;

fn part() -> RegimePartition {
    RegimePartition::from_stars(0.40, 0.45)
}

/// Multiplicative ±`rel` perturbation of every aerodynamic coefficient.
fn perturbed(phi: &PhysicalParams, rel: f64, seed: u64) -> PhysicalParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = phi.clone();
    let jitter = |theta: Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        theta.iter().map(|t| t * (1.0 + rng.random_range(-rel..rel))).collect()
    };
    let acm = jitter(phi.acm.params(), &mut rng);
    out.acm.set_params(&acm);
    let gdm = jitter(phi.gdm.params(), &mut rng);
    out.gdm.set_params(&gdm);
    out
}

struct World {
    phi_true: PhysicalParams,
    part: RegimePartition,
    records: Vec<TrajectoryRecord>,
    pools: RegionPools,
    phi0: PhysicalParams,
    phi_hat: PhysicalParams,
    xi_hat: MixerParams,
    report: FitReport,
    cfg: LossConfig,
    build_secs: f64,
}

fn build_world(smooth: bool, configs: usize, repeats: usize, seed: u64) -> World {
    let t0 = Instant::now();
    let phi_true = ground_truth();
    let part = part();
    let spec = SynthSpec { smooth_blend: smooth, seed, ..SynthSpec::default() };
    let grid = config_grid(configs);
    let records = generate_dataset(&grid, repeats, &phi_true, &part, &spec).unwrap();
    let pools = partition_dataset(&records, &part);
    let phi0 = perturbed(&phi_true, 0.2, seed ^ 0xA5A5);
    let xi0 = MixerParams::init(seed, 0.9, 1.2);
    let mut cfg = LossConfig::defaults(&part);
    cfg.seed = seed;
    // Fit velocities and attitudes only: integrated positions carry the
    // motion-capture noise but no extra parameter information at one step.
    // The smoothness weight stays out of the data term's way; the anchors
    // alone already pin the pure regions.
    cfg.w = [0.0, 0.0, 0.0, 1e3, 1e3, 1e3, 1e3, 1e3, 1e3, 1e3, 1e3, 1e3];
    cfg.reg = RegGrids::build(&part, 0.9, 1.2, 64, (21, 21), (1.0, 1.0, 1e-6), MonoSign::default());
    cfg.n3 = 150;
    let (phi_hat, xi_hat, report) =
        three_phase_train(&pools, &phi0, &xi0, &cfg).unwrap();
    World {
        phi_true,
        part,
        records,
        pools,
        phi0,
        phi_hat,
        xi_hat,
        report,
        cfg,
        build_secs: t0.elapsed().as_secs_f64(),
    }
}

/// Round-trip world: region-pure mixing, 120 trajectories.
fn world_pure() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| build_world(false, 40, 3, 17))
}

/// Ordering world: smooth mixing everywhere, 3:1 split by configuration.
fn world_smooth() -> &'static (World, Vec<TrajectoryRecord>) {
    static W: OnceLock<(World, Vec<TrajectoryRecord>)> = OnceLock::new();
    W.get_or_init(|| {
        let all = build_world(true, 20, 4, 29);
        let outcome = split(&all.records, &SplitSpec::default()).unwrap();
        let train: Vec<TrajectoryRecord> =
            outcome.train.iter().map(|&i| all.records[i].clone()).collect();
        let test: Vec<TrajectoryRecord> =
            outcome.test.iter().map(|&i| all.records[i].clone()).collect();
        // Retrain on the training split only so the evaluation is held out.
        let pools = partition_dataset(&train, &all.part);
        let (phi_hat, xi_hat, report) =
            three_phase_train(&pools, &all.phi0, &MixerParams::init(29, 0.9, 1.2), &all.cfg)
                .unwrap();
        let world = World {
            pools,
            phi_hat,
            xi_hat,
            report,
            records: train,
            ..all
        };
        (world, test)
    })
}

#[test]
fn accept_01_math_core_suite() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let e = EulerAngles::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.4..1.4),
            rng.random_range(-3.0..3.0),
        );
        let r = rotation_body_to_inertial(&e);
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        assert!(err < 1e-12, "orthonormality residual {err}");
        assert!((r.determinant() - 1.0).abs() < 1e-12);

        let a = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let b = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let s = skew(&a);
        assert!((s * b - a.cross(&b)).norm() < 1e-14);
        assert!((s + s.transpose()).abs().max() == 0.0);
    }
    // Euler-rate map sanity at a benign attitude.
    let w = euler_rate_map(&EulerAngles::new(0.3, 0.2, -1.0)).unwrap();
    assert!(w.determinant().abs() > 1e-3);

    // Integration order of the stepper on x' = -x over [0, 1].
    let decay = |x: &SVector<f64, 1>| Ok::<_, MathError>(SVector::<f64, 1>::new(-x[0]));
    let run = |n: usize| {
        let mut x = SVector::<f64, 1>::new(1.0);
        for _ in 0..n {
            x = rk4_step(decay, &x, 1.0 / n as f64).unwrap();
        }
        (x[0] - (-1.0f64).exp()).abs()
    };
    let order = (run(16) / run(32)).log2();
    assert!(
        (3.8..=4.2).contains(&order),
        "integration order {order} outside [3.8, 4.2]"
    );

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "math-core suite took {secs:.1} s");
    println!("ACCEPTANCE math-core suite: PASS ({secs:.2} s)");
}

#[test]
fn accept_02_dynamics_endpoint_identities() {
    let phi = ground_truth();
    let u = ControlInput::steady(0.04, 0.035, Vec3::new(0.01, 0.0, -0.15));
    let x0 = StateVector::new(
        Vec6::new(0.0, 0.0, -1.0, 0.05, -0.02, 0.3),
        Vec6::new(0.5, 0.02, 0.12, 0.01, -0.02, 0.05),
    );
    let inputs = vec![u; 500];
    let dt = 1.0 / RATE;

    // λ pinned at an endpoint must reproduce the dedicated single-model
    // rollout bit for bit.
    for (lam, mode) in [(0.0, MixingMode::AcmOnly), (1.0, MixingMode::GdmOnly)] {
        let dedicated = rollout(&x0, &inputs, &phi, mode, None, None, dt).unwrap();
        let factor = MassFactor::new(&phi, &u).unwrap();
        let mut x = x0;
        for (i, u) in inputs.iter().enumerate() {
            x = step_with_lambda(&x, u, &phi, &factor, lam, dt).unwrap();
            let got = x.svector();
            let want = dedicated[i + 1].svector();
            for k in 0..12 {
                assert_eq!(
                    got[k].to_bits(),
                    want[k].to_bits(),
                    "λ={lam} step {i} component {k}"
                );
            }
        }
    }

    // The state derivative is affine in λ.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let x = StateVector::new(
            Vec6::from_fn(|i, _| if i < 3 { 0.0 } else { rng.random_range(-0.5..0.5) }),
            Vec6::from_fn(|_, _| rng.random_range(-0.6..0.6)),
        );
        let d0 = hybrid_derivative(&x, &u, &phi, 0.0).unwrap();
        let d1 = hybrid_derivative(&x, &u, &phi, 1.0).unwrap();
        for lam in [0.25, 0.5, 0.779] {
            let d = hybrid_derivative(&x, &u, &phi, lam).unwrap();
            let affine = (1.0 - lam) * d0 + lam * d1;
            for k in 0..12 {
                let scale = d[k].abs().max(affine[k].abs()).max(1e-3);
                assert!(
                    (d[k] - affine[k]).abs() <= 1e-12 * scale,
                    "component {k} at λ={lam}"
                );
            }
        }
    }
    println!("ACCEPTANCE dynamics endpoint identities: PASS");
}

#[test]
fn accept_03_power_balance() {
    let mut phi = ground_truth();
    phi.r0 = Vec3::zeros();
    let u = ControlInput::steady(0.0, 0.0, Vec3::zeros());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let nu = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let c_rb = coriolis_matrix(&phi, &u, &nu);
        let p_rb = (nu.transpose() * c_rb * nu)[0];
        let scale = (c_rb * nu).norm() * nu.norm();
        assert!(
            p_rb.abs() <= 1e-10 * scale.max(1e-12),
            "rigid-body power {p_rb} at scale {scale}"
        );

        let (_, c_a) = added_mass_terms(&phi, &nu);
        let p_a = (nu.transpose() * c_a * nu)[0];
        let scale_a = (c_a * nu).norm() * nu.norm();
        assert!(
            p_a.abs() <= 1e-10 * scale_a.max(1e-12),
            "added-mass power {p_a} at scale {scale_a}"
        );
    }
    println!("ACCEPTANCE power balance: PASS");
}

#[test]
fn accept_04_gradient_contract_and_phase_isolation() {
    let w = world_pure();
    let cfg = &w.cfg;
    for (phase, pool) in [
        (Phase::AcmFit, &w.pools.acm),
        (Phase::GdmFit, &w.pools.gdm),
        (Phase::MixerFit, &w.pools.transition),
    ] {
        let batch = &pool[..pool.len().min(192)];
        let rep = gradient_check(phase, &w.phi0, &w.xi_hat, batch, cfg, 50, 41).unwrap();
        assert_eq!(
            rep.failures, 0,
            "{phase:?}: {} of {} points violate the contract (worst {:.3})",
            rep.failures, rep.points, rep.max_violation
        );
    }

    // Phase isolation: gradients of inactive blocks are identically zero,
    // and perturbing an inactive block leaves the loss bit-identical.
    let batch = &w.pools.acm[..w.pools.acm.len().min(128)];
    let g = loss_gradient(Phase::AcmFit, &w.phi0, Some(&w.xi_hat), batch, cfg).unwrap();
    assert!(g.gdm.iter().all(|&v| v == 0.0));
    assert!(g.mixer.iter().all(|&v| v == 0.0));
    assert!(g.acm.iter().any(|&v| v != 0.0));

    let base = prediction_loss(Phase::AcmFit, &w.phi0, None, batch, &cfg.w).unwrap();
    let mut poked = w.phi0.clone();
    let mut gdm = poked.gdm.params();
    for v in &mut gdm {
        *v *= 3.0;
    }
    poked.gdm.set_params(&gdm);
    let after = prediction_loss(Phase::AcmFit, &poked, None, batch, &cfg.w).unwrap();
    assert_eq!(base.to_bits(), after.to_bits(), "inactive block leaked into the loss");
    println!("ACCEPTANCE gradient contract and phase isolation: PASS");
}

#[test]
fn accept_05_synthetic_round_trip() {
    let w = world_pure();
    assert!(w.records.len() >= 120, "only {} trajectories", w.records.len());

    // Identifiability screen: a parameter counts as identifiable when
    // wiggling it by ±20% moves the training loss by at least 25% against
    // the background of the perturbed initialization.
    let sens = parameter_sensitivity(&w.phi0, &w.pools, &w.cfg, 0.2).unwrap();

    let truth: Vec<(String, f64)> = w
        .phi_true
        .acm
        .param_names()
        .into_iter()
        .zip(w.phi_true.acm.params())
        .chain(w.phi_true.gdm.param_names().into_iter().zip(w.phi_true.gdm.params()))
        .collect();
    let fitted: Vec<f64> =
        w.phi_hat.acm.params().into_iter().chain(w.phi_hat.gdm.params()).collect();

    let mut identifiable = 0;
    let mut lines = String::new();
    for ((name, ratio), ((tname, tval), fval)) in
        sens.iter().zip(truth.iter().zip(&fitted))
    {
        assert_eq!(name, tname);
        let rel = (fval - tval).abs() / tval.abs();
        let screened = *ratio >= 1.25;
        lines += &format!(
            "  {tname:<8} sensitivity {ratio:8.3} recovered {rel:7.4} {}\n",
            if screened { "identifiable" } else { "-" }
        );
        if screened {
            identifiable += 1;
            assert!(
                rel <= 0.05,
                "{tname}: recovered {fval:.5} vs true {tval:.5} ({:.1}% off)",
                100.0 * rel
            );
        }
    }
    print!("{lines}");
    assert!(
        identifiable >= 8,
        "only {identifiable} parameters cleared the identifiability screen"
    );

    let mae = lambda_mae(
        &w.xi_hat,
        &|a, v| true_lambda(&w.part, a, v),
        &w.part,
        0.9,
        1.2,
        41,
    );
    assert!(mae < 0.05, "mixing-surface MAE {mae:.4}");

    assert!(
        w.build_secs < 900.0,
        "round trip took {:.0} s, budget is 900",
        w.build_secs
    );
    println!(
        "ACCEPTANCE synthetic round trip: PASS ({} records, {identifiable} identifiable \
         params within 5%, λ MAE {mae:.4}, {:.0} s)",
        w.records.len(),
        w.build_secs
    );
}

#[test]
fn accept_06_mixer_regularization_efficacy() {
    let w = world_pure();
    let (mean_acm, mean_gdm) = anchor_means(&w.xi_hat, &w.cfg.reg);
    assert!(mean_acm < 0.1, "mean λ over fast-regime anchors: {mean_acm:.4}");
    assert!(mean_gdm > 0.9, "mean λ over slow-regime anchors: {mean_gdm:.4}");

    let total = *w.report.loss_curves[2].last().expect("phase-3 curve");
    let mono = w.cfg.reg.w_mono * mono_loss(&w.xi_hat, &w.cfg.reg);
    assert!(
        mono < 0.01 * total,
        "monotonicity term {mono:.3e} is not under 1% of the total loss {total:.3e}"
    );
    println!(
        "ACCEPTANCE mixer regularization efficacy: PASS (anchor means {mean_acm:.3}/{mean_gdm:.3}, \
         monotonicity share {:.2e})",
        mono / total
    );
}

#[test]
fn accept_07_baseline_ordering() {
    let (w, test) = world_smooth();
    let report = evaluate(
        test,
        &[
            MixingMode::Neural,
            MixingMode::SigmoidFixed,
            MixingMode::Hard,
            MixingMode::AcmOnly,
            MixingMode::GdmOnly,
        ],
        &w.phi_hat,
        Some(&w.xi_hat),
        &w.part,
        &w.cfg.w,
        Horizon::OneStep,
    )
    .unwrap();
    let total = |mode: MixingMode| -> f64 {
        report
            .region_rmse
            .iter()
            .find(|r| r.mode == mode)
            .and_then(|r| r.total)
            .unwrap_or(f64::NAN)
    };
    let neural = total(MixingMode::Neural);
    let sigmoid = total(MixingMode::SigmoidFixed);
    let hard = total(MixingMode::Hard);
    let acm = total(MixingMode::AcmOnly);
    let gdm = total(MixingMode::GdmOnly);
    println!(
        "  one-step RMSE: neural {neural:.6} sigmoid {sigmoid:.6} hard {hard:.6} \
         acm {acm:.6} gdm {gdm:.6}"
    );
    assert!(neural <= sigmoid, "neural {neural} > sigmoid {sigmoid}");
    assert!(sigmoid <= hard, "sigmoid {sigmoid} > hard {hard}");
    assert!(
        hard <= acm.min(gdm),
        "hard {hard} > best single model {}",
        acm.min(gdm)
    );
    println!("ACCEPTANCE baseline ordering: PASS");
}

#[test]
fn accept_08_threshold_selection() {
    // Planted regime break: one coefficient law holds only below α = 0.30
    // and above V = 0.45; elsewhere the wrench is four times a drag fit.
    let phi = ground_truth();
    let mut samples: Vec<SteadySample> = Vec::new();
    let mut k = 0usize;
    for i in 0..22 {
        let alpha = 0.02 + 0.58 * i as f64 / 21.0;
        for j in 0..16 {
            let speed = 0.15 + 0.85 * j as f64 / 15.0;
            let beta: f64 = [-0.15, 0.0, 0.15][k % 3];
            k += 1;
            let (sa, ca) = alpha.sin_cos();
            let (sb, cb) = beta.sin_cos();
            let nu = Vec6::new(
                speed * cb * ca,
                speed * sb,
                speed * cb * sa,
                0.05 * ((k % 5) as f64 - 2.0),
                0.04 * ((k % 7) as f64 - 3.0),
                0.015 * ((k % 4) as f64 - 1.5),
            );
            let wrench = if alpha < 0.30 && speed > 0.45 {
                acm_wrench(&phi.acm, &nu)
            } else {
                let mut w = gdm_wrench(&phi.gdm, &nu);
                w.force *= 4.0;
                w.moment *= 4.0;
                w
            };
            samples.push(SteadySample::new(&nu, wrench, &phi.acm));
        }
    }
    let (selected, fit, _) = threshold_scan(&samples, 8).unwrap();
    assert!(fit.r_squared > 0.9, "corner fit R² {}", fit.r_squared);
    assert!(
        (0.25..=0.35).contains(&selected.alpha_star),
        "α* = {}",
        selected.alpha_star
    );

    // Band arithmetic from the stars.
    let p = RegimePartition::from_stars(0.40, 0.45);
    assert!((p.alpha1 - 0.32).abs() < 1e-15);
    assert!((p.alpha2 - 0.48).abs() < 1e-15);
    assert!((p.v1 - 0.36).abs() < 1e-15);
    assert!((p.v2 - 0.54).abs() < 1e-15);
    println!(
        "ACCEPTANCE threshold selection: PASS (α* {:.3}, V* {:.3})",
        selected.alpha_star, selected.v_star
    );
}

#[test]
fn accept_09_data_pipeline() {
    // Full-scale corpus: 330 configurations, 4 repeats each.
    let phi = ground_truth();
    let spec = SynthSpec::default();
    let records =
        generate_dataset(&config_grid(330), 4, &phi, &part(), &spec).unwrap();
    assert_eq!(records.len(), 1320);

    let dir = tempfile::tempdir().unwrap();
    for rec in &records {
        save_trajectory(&dir.path().join(format!("{}.csv", rec.id)), rec).unwrap();
    }
    let t0 = Instant::now();
    let loaded = load_dir(dir.path()).unwrap();
    let ingest = t0.elapsed().as_secs_f64();
    assert_eq!(loaded.len(), 1320);
    assert!(ingest < 30.0, "ingest took {ingest:.1} s");

    // Lossless round trip for every record (ids differ only by load order).
    let mut by_id: std::collections::BTreeMap<&str, &TrajectoryRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    for rec in &loaded {
        let original = by_id.remove(rec.id.as_str()).expect("unknown id");
        assert_eq!(rec, original);
    }
    assert!(by_id.is_empty());

    // Serialization text also round-trips without touching disk.
    let text = format_trajectory(&records[7]);
    assert_eq!(parse_trajectory(&text, "x").unwrap(), records[7]);

    // Mirroring is an involution.
    for rec in records.iter().take(20) {
        assert_eq!(&mirror_trajectory(&mirror_trajectory(rec)), rec);
    }

    // Stratified 3:1 split puts exactly three repeats in train and one in
    // test for every configuration.
    let outcome = split(&records, &SplitSpec::default()).unwrap();
    assert!(outcome.stratified);
    let mut per_config: std::collections::BTreeMap<(u8, u8, i8), (usize, usize)> =
        std::collections::BTreeMap::new();
    for &i in &outcome.train {
        per_config.entry(records[i].config_key()).or_default().0 += 1;
    }
    for &i in &outcome.test {
        per_config.entry(records[i].config_key()).or_default().1 += 1;
    }
    assert_eq!(per_config.len(), 330);
    for (key, counts) in per_config {
        assert_eq!(counts, (3, 1), "config {key:?}");
    }
    println!("ACCEPTANCE data pipeline: PASS (1320 records ingested in {ingest:.1} s)");
}

#[test]
fn accept_10_public_dataset_ingestion() {
    let Ok(dir) = std::env::var("BLIMP_PUBLIC_DATA") else {
        println!(
            "ACCEPTANCE public dataset ingestion: SKIP \
             (set BLIMP_PUBLIC_DATA to the trajectory directory to enable)"
        );
        return;
    };
    let records = load_dir(std::path::Path::new(&dir)).unwrap();
    assert!(!records.is_empty(), "no trajectories under {dir}");
    let samples = extract_steady_samples(&records, &PhysicalParams::default_vehicle());
    let n = samples.len();
    assert!(
        (338..=458).contains(&n),
        "{n} steady samples, expected 398 ± 15%"
    );
    println!("ACCEPTANCE public dataset ingestion: PASS ({n} steady samples)");
}
