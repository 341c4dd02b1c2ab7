//! Acceptance suite: one PASS/FAIL line per criterion.

use std::process::Command;
use std::time::Instant;

use cqlimit::cli::{ho_oracle_sweep, ClosedForm, HoOracleSpec};
use cqlimit::cq_generator::{
    cnm_rule_violations, d_matrices, h_eff, lindblad_ops, qcle_matrices, tradeoff_check, CnmTable, HeffOptions,
};
use cqlimit::cq_hamiltonian::{CqHamiltonian, ModelKind, ModelParams};
use cqlimit::evolvers::{
    convergence_study, evolve, EvolveOptions, EvolveReport, Generator, GeneratorKind, GeneratorTag, Ordering,
};
use cqlimit::operator_algebra::{c, identity, pauli_z, Op, StateVec};
use cqlimit::par::ExecPolicy;
use cqlimit::phase_space::{coherent_product_state, OperatorField, PhaseGrid, Representation};
use cqlimit::unravelling::{run_ensemble, EnsembleConfig, GeneratorSource, LatticeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Outcome {
    pass: bool,
    summary: String,
    info: Vec<String>,
}

fn outcome(pass: bool, summary: String) -> Outcome {
    Outcome {
        pass,
        summary,
        info: Vec::new(),
    }
}

fn policy() -> ExecPolicy {
    ExecPolicy::default()
}

fn kind(tag: GeneratorTag, model: ModelKind, p: &ModelParams) -> GeneratorKind {
    GeneratorKind::new(tag, *p, CqHamiltonian::builtin(model, p).unwrap()).unwrap()
}

fn qubit_psi() -> StateVec {
    StateVec::from_vec(vec![c(0.4f64.cos(), 0.0), c(0.4f64.sin(), 0.0)])
}

/// Hermitian field built from a handful of random periodic Fourier modes.
fn random_smooth_field(grid: PhaseGrid, d: usize, rng: &mut ChaCha20Rng) -> OperatorField {
    let tau = std::f64::consts::TAU;
    let modes: Vec<(f64, f64, f64, Op)> = (0..4)
        .map(|_| {
            let kq = rng.gen_range(0..3) as f64;
            let kp = rng.gen_range(0..3) as f64;
            let ph = rng.gen_range(0.0..tau);
            let a = Op::from_fn(d, d, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let herm = (&a + a.adjoint()) * c(0.5, 0.0);
            (kq, kp, ph, herm)
        })
        .collect();
    let (lq, lp) = (grid.q_max - grid.q_min, grid.p_max - grid.p_min);
    OperatorField::from_fn(grid, d, Representation::W, |q, p| {
        let x = tau * (q - grid.q_min) / lq;
        let y = tau * (p - grid.p_min) / lp;
        let mut m = identity(d) * c(2.0, 0.0);
        for (kq, kp, ph, a) in &modes {
            m += a * c((kq * x + kp * y + ph).cos(), 0.0);
        }
        m
    })
}

fn max_diff(a: &OperatorField, b: &OperatorField) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let printed: [&[i64]; 7] = [
        &[0],
        &[1, -1],
        &[2, 0, -2],
        &[3, 2, -2, -3],
        &[4, 5, 0, -5, -4],
        &[5, 9, 5, -5, -9, -5],
        &[6, 14, 14, 0, -14, -14, -6],
    ];
    let table = CnmTable::new(6).unwrap();
    let mut mismatches = 0;
    for (k, row) in printed.iter().enumerate() {
        mismatches += table
            .row(k as u32)
            .iter()
            .zip(row.iter())
            .filter(|(a, b)| a != b)
            .count();
    }
    let rules = cnm_rule_violations(20).unwrap();
    outcome(
        mismatches == 0 && rules.is_empty(),
        format!(
            "C_nm triangle: {} of 28 printed entries differ, {} rule breaches for n, m <= 20",
            mismatches,
            rules.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (mut worst_abs, mut worst_rel, mut worst_range) = (0.0f64, 0.0f64, 0.0f64);
    let mut worst_at = (0.0, 0.0);
    for _ in 0..100 {
        let e = 10f64.powf(rng.gen_range(-2.0..2.0));
        let s = 10f64.powf(rng.gen_range(-2.0..2.0));
        let r = tradeoff_check(&d_matrices(e, s).unwrap(), 1e-12);
        if r.saturation_residual > worst_abs {
            worst_abs = r.saturation_residual;
            worst_at = (e, s);
        }
        worst_rel = worst_rel.max(r.saturation_relative);
        worst_range = worst_range.max(r.range_residual);
    }
    let mut o = outcome(
        worst_abs < 1e-12 && worst_range < 1e-12,
        format!(
            "trade-off saturation over 100 (E, s): max ||D0 - D1^+ D2^-1 D1|| = {worst_abs:.2e}, max ||(I - D2 D2^-1) D1|| = {worst_range:.2e} (tol 1e-12)"
        ),
    );
    o.info.push(format!(
        "largest residual at E = {:.3e}, s = {:.3e}; max relative residual {worst_rel:.2e}",
        worst_at.0, worst_at.1
    ));
    o
}

fn criterion_3() -> Outcome {
    let base = ModelParams {
        fock_dim: 20,
        ..Default::default()
    };
    let heff = HeffOptions::default();
    let sweep = |form| {
        let spec = HoOracleSpec {
            closed_form: form,
            ..Default::default()
        };
        let rows = ho_oracle_sweep(&base, &spec, &heff).unwrap();
        let ml = rows.iter().map(|r| r.rel_err_lq.max(r.rel_err_lp)).fold(0.0, f64::max);
        let mh = rows.iter().map(|r| r.rel_err_heff).fold(0.0, f64::max);
        let max_arg = rows.iter().map(|r| r.argument).fold(0.0, f64::max);
        (rows.len(), ml, mh, max_arg)
    };
    let (n, ml, mh, max_arg) = sweep(ClosedForm::Printed);
    let mut o = outcome(
        n >= 27 && ml <= 1e-8 && mh <= 1e-6,
        format!(
            "oscillator oracle vs printed closed forms: {n} combinations (argument <= {max_arg:.2}), max rel err L {ml:.2e} (tol 1e-8), H_eff {mh:.2e} (tol 1e-6)"
        ),
    );
    let (n, ml, mh, _) = sweep(ClosedForm::Derived);
    o.info.push(format!(
        "vs closed forms derived from the same adjoint algebra: {n} combinations, max rel err L {ml:.2e}, H_eff {mh:.2e}"
    ));
    o
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let g = PhaseGrid::periodic_square(6.0, 64).unwrap();
    let single = ModelParams {
        omega: 0.7,
        s: 1.3,
        e: 0.8,
        dim: 1,
        ..Default::default()
    };
    let a = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::SingleSystem, &single), &g, policy()).unwrap();
    let b = Generator::build(&kind(GeneratorTag::FokkerPlanck, ModelKind::SingleSystem, &single), &g, policy()).unwrap();
    let f = random_smooth_field(g, 1, &mut rng);
    let d_fp = max_diff(&a.apply_raw(&f, true).unwrap(), &b.apply_raw(&f, true).unwrap());
    let qubit = ModelParams {
        g: 0.8,
        s: 0.9,
        e: 1.7,
        ..Default::default()
    };
    let a = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::QubitLinear, &qubit), &g, policy()).unwrap();
    let b = Generator::build(&kind(GeneratorTag::SelfCommuting, ModelKind::QubitLinear, &qubit), &g, policy()).unwrap();
    let f = random_smooth_field(g, 2, &mut rng);
    let d_sc = max_diff(&a.apply_raw(&f, true).unwrap(), &b.apply_raw(&f, true).unwrap());
    outcome(
        d_fp < 1e-8 && d_sc < 1e-8,
        format!(
            "reductions on 64x64: |main_cq - fokker_planck| = {d_fp:.2e} (single system), |main_cq - self_commuting| = {d_sc:.2e} (qubit_linear), tol 1e-8"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let g = PhaseGrid::periodic_square(4.0, 32).unwrap();
    let p = ModelParams {
        g: 0.7,
        delta: 1.3,
        s: 0.8,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for model in [ModelKind::QubitTransverse, ModelKind::QubitLinear] {
        let build = |t| Generator::build(&kind(t, model, &p), &g, policy()).unwrap();
        let (hu, gl, qc) = (
            build(GeneratorTag::HusimiH0),
            build(GeneratorTag::GlauberH0),
            build(GeneratorTag::Qcle),
        );
        for _ in 0..3 {
            let f = random_smooth_field(g, 2, &mut rng);
            let mut avg = hu.apply_raw(&f, true).unwrap();
            avg.axpy(c(1.0, 0.0), &gl.apply_raw(&f, true).unwrap()).unwrap();
            let avg = avg.scaled(c(0.5, 0.0));
            worst = worst.max(max_diff(&avg, &qc.apply_raw(&f, true).unwrap()));
        }
    }
    outcome(
        worst < 1e-12,
        format!("(husimi_h0 + glauber_h0)/2 vs qcle on 6 random fields: max |diff| = {worst:.2e} (tol 1e-12)"),
    )
}

fn qubit_master_run() -> (ModelParams, EvolveReport) {
    let p = ModelParams::default();
    let g = PhaseGrid::periodic_square(10.0, 128).unwrap();
    let gen = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::QubitTransverse, &p), &g, policy()).unwrap();
    let f = coherent_product_state(&g, 0.0, 0.5, p.hbar, p.s, &qubit_psi()).unwrap();
    let opts = EvolveOptions {
        t_final: 1.0,
        observe_every: Some(0.2),
        ..Default::default()
    };
    (p, evolve(&gen, &f, &opts).unwrap())
}

fn criterion_6(rep: &EvolveReport) -> Outcome {
    let drift = rep.trace_drift();
    let anti = rep.series.iter().map(|r| r.max_anti_hermitian).fold(0.0, f64::max);
    let neg = rep
        .series
        .iter()
        .map(|r| r.min_eig / r.peak_density)
        .fold(f64::INFINITY, f64::min);
    outcome(
        drift <= 1e-6 && anti <= 1e-9 && neg >= -1e-4,
        format!(
            "qubit main_cq 128x128 to t = 1 ({} steps): trace drift {drift:.2e} (tol 1e-6), anti-Hermitian {anti:.2e} (tol 1e-9), min eig / peak {neg:.2e} (>= -1e-4)",
            rep.steps
        ),
    )
}

fn criterion_7() -> Outcome {
    let p = ModelParams {
        dim: 1,
        e: 0.5,
        s: 1.2,
        ..Default::default()
    };
    let g = PhaseGrid::periodic_square(8.0, 64).unwrap();
    let gen = Generator::build(&kind(GeneratorTag::MainCq, ModelKind::SingleSystem, &p), &g, policy()).unwrap();
    let psi = StateVec::from_vec(vec![c(1.0, 0.0)]);
    let f = coherent_product_state(&g, 0.0, 0.0, p.hbar, p.s, &psi).unwrap();
    let rep = evolve(
        &gen,
        &f,
        &EvolveOptions {
            t_final: 1.0,
            ..Default::default()
        },
    )
    .unwrap();
    let (a, b) = (&rep.series[0], &rep.series[1]);
    let want = a.var_p + p.e / (p.s * p.s);
    let rel = (b.var_p - want).abs() / want;
    outcome(
        rel <= 0.01,
        format!(
            "free particle Var_p(1) = {:.6} vs Var_p(0) + E/s^2 = {want:.6}: rel err {rel:.2e} (tol 1e-2)",
            b.var_p
        ),
    )
}

fn criterion_8() -> Outcome {
    let p = ModelParams {
        dim: 1,
        ..Default::default()
    };
    let g = PhaseGrid::periodic_square(10.0, 64).unwrap();
    let k = kind(GeneratorTag::MainCq, ModelKind::SingleSystem, &p);
    let psi = StateVec::from_vec(vec![c(1.0, 0.0)]);
    let f = coherent_product_state(&g, -0.5, 1.0, p.hbar, p.s, &psi).unwrap();
    let taus = [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];
    let mut pass = true;
    let mut parts = Vec::new();
    let mut info = Vec::new();
    for ord in [Ordering::Sym, Ordering::Pre, Ordering::Post] {
        let st = convergence_study(&k, &f, 1.0, &taus, ord, policy()).unwrap();
        pass &= st.monotone && st.slope >= 0.8;
        parts.push(format!("{ord:?} slope {:.2}{}", st.slope, if st.monotone { "" } else { " (not monotone)" }));
        let errs: Vec<String> = st.rows.iter().map(|r| format!("{:.3e}", r.l1_error)).collect();
        info.push(format!("{ord:?} L1 errors at tau = 1/64, 1/128, 1/256: {}", errs.join(", ")));
    }
    Outcome {
        pass,
        summary: format!("Trotter convergence, free particle: {} (>= 0.8, decreasing)", parts.join(", ")),
        info,
    }
}

fn criterion_9(p: &ModelParams, me: &EvolveReport) -> Outcome {
    let h = CqHamiltonian::builtin(ModelKind::QubitTransverse, p).unwrap();
    let lattice = LatticeSpec {
        q_min: -14.0,
        q_max: 14.0,
        n_q: 1401,
        p_min: -14.0,
        p_max: 14.0,
        n_p: 2,
    };
    let src = GeneratorSource::with_lattice(h, *p, HeffOptions::default(), lattice, policy()).unwrap();
    let dt = 1e-3;
    let mut cfg = EnsembleConfig::new(10_000, 1.0, dt, 9, qubit_psi());
    cfg.p0 = 0.5;
    cfg.checkpoints = vec![0.2, 0.4, 0.6, 0.8, 1.0];
    cfg.observables = vec![("sigma_z".into(), pauli_z())];
    let rep = run_ensemble(&src, &cfg, policy()).unwrap();
    let mut worst = 0.0f64;
    let mut info = Vec::new();
    for (row, me_row) in rep.rows.iter().zip(&me.series[1..]) {
        let sz = &row.observables[0];
        let me_sz = me_row.quantum_expectation(&pauli_z());
        let z = [
            (row.mean_q - me_row.mean_q) / row.se_q,
            (row.mean_p - me_row.mean_p) / row.se_p,
            (sz.mean - me_sz) / sz.se,
        ];
        worst = z.iter().fold(worst, |m, v| m.max(v.abs()));
        info.push(format!(
            "t = {:.1}: <q> {:+.4} vs {:+.4}, <p> {:+.4} vs {:+.4}, <sz> {:+.4} vs {:+.4} (z = {:+.2}, {:+.2}, {:+.2})",
            row.t, row.mean_q, me_row.mean_q, row.mean_p, me_row.mean_p, sz.mean, me_sz, z[0], z[1], z[2]
        ));
    }
    let purity_ok = rep.max_purity_defect <= 5.0 * dt;
    Outcome {
        pass: rep.rows.len() == 5 && worst <= 3.0 && purity_ok,
        summary: format!(
            "unravelling, 1e4 trajectories vs master equation at 5 times: max |z| = {worst:.2} (<= 3), max purity defect {:.2e} (<= {:.1e})",
            rep.max_purity_defect,
            5.0 * dt
        ),
        info,
    }
}

fn block_fro(a: &Op, k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            s += a[(i, j)].norm_sqr();
        }
    }
    s.sqrt()
}

fn traceless_block(a: &Op, k: usize) -> Op {
    let mean = (0..k).map(|i| a[(i, i)]).sum::<num_complex::Complex64>() / k as f64;
    a - identity(a.nrows()) * mean
}

fn criterion_10() -> Outcome {
    let base = ModelParams {
        hbar: 0.5,
        lambda: 1.0,
        m_q: 1.0,
        fock_dim: 20,
        ..Default::default()
    };
    let k = 10;
    let es = [1.0, 0.1, 0.01, 0.001];
    let measure = |q: f64, p: f64| -> (Vec<f64>, Vec<f64>) {
        let mut lq_n = Vec::new();
        let mut he_n = Vec::new();
        for &e in &es {
            let params = ModelParams { e, ..base };
            let h = CqHamiltonian::builtin(ModelKind::CoupledOscillators, &params).unwrap();
            let (lq, _) = lindblad_ops(&h, q, p, e).unwrap();
            let he = h_eff(&h, q, p, e, params.hbar, params.s, &HeffOptions::default()).unwrap().op;
            lq_n.push(block_fro(&lq, k).powi(2) / e);
            he_n.push(block_fro(&traceless_block(&he, k), k));
        }
        (lq_n, he_n)
    };
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ");
    let (lq, he) = measure(0.3, 0.7);
    let mut o = outcome(
        decreasing(&lq) && decreasing(&he) && lq[3] < 1e-2 * lq[0] && he[3] < 1e-2 * he[0].max(1e-300),
        format!(
            "E -> 0 at (q, p) = (0.3, 0.7), E = 1, .1, .01, .001: ||L_q||^2/E = [{}], ||H_eff traceless|| = [{}]",
            fmt(&lq),
            fmt(&he)
        ),
    );
    let (_, he0) = measure(0.3, 0.0);
    o.info.push(format!("at p = 0: ||H_eff traceless|| = [{}]", fmt(&he0)));
    o.info.push("norms are Frobenius over the leading 10 Fock states of 20".into());
    o
}

fn criterion_11() -> Outcome {
    let r = tradeoff_check(&qcle_matrices(), 1e-12);
    let dir = std::env::temp_dir().join(format!("cqlimit_acceptance_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("qcle.json");
    std::fs::write(&cfg, r#"{"model": "qubit_transverse", "generator": "qcle"}"#).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_cqlimit"))
        .args(["check-positivity", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
        .status;
    let _ = std::fs::remove_dir_all(&dir);
    outcome(
        !r.range_condition && !r.passes() && status.code() == Some(2),
        format!(
            "negative control: QCLE range condition {} (residual {:.2e}), check-positivity exit code {:?}",
            if r.range_condition { "holds" } else { "fails" },
            r.range_residual,
            status.code()
        ),
    )
}

fn main() {
    let mut passed = 0;
    let mut total = 0;
    let mut report = |id: u32, t0: Instant, o: Outcome| {
        total += 1;
        if o.pass {
            passed += 1;
        }
        println!(
            "criterion {id:>2} [{}] {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.summary,
            t0.elapsed().as_secs_f64()
        );
        for line in o.info {
            println!("              info: {line}");
        }
    };
    let t = Instant::now();
    report(1, t, criterion_1());
    let t = Instant::now();
    report(2, t, criterion_2());
    let t = Instant::now();
    report(3, t, criterion_3());
    let t = Instant::now();
    report(4, t, criterion_4());
    let t = Instant::now();
    report(5, t, criterion_5());
    let t = Instant::now();
    let (qp, me) = qubit_master_run();
    report(6, t, criterion_6(&me));
    let t = Instant::now();
    report(7, t, criterion_7());
    let t = Instant::now();
    report(8, t, criterion_8());
    let t = Instant::now();
    report(9, t, criterion_9(&qp, &me));
    let t = Instant::now();
    report(10, t, criterion_10());
    let t = Instant::now();
    report(11, t, criterion_11());
    println!("acceptance: {passed}/{total} criteria passed");
    if passed != total {
        std::process::exit(1);
    }
}
