//! Acceptance run: one `[PASS]` or `[FAIL]` line per criterion. The three
//! closed-loop criteria share one full run of the bundled three-agent
//! scenario; a second identical run and a replay check determinism.

#[path = "../../core/tests/common/mod.rs"]
mod core_fixtures;
#[path = "../../nmpc/tests/common/mod.rs"]
mod nmpc_fixtures;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cotrans_cli::run::load;
use cotrans_cli::{run, ExitCode, RunReport, RunRequest};
use cotrans_core::agent::{
    forward_kinematics, geometric_jacobian, inertia_matrix, joint_space_terms, kinetic_energy, potential_energy,
    AgentParams,
};
use cotrans_core::coupled::{coupled_terms, right_pseudo_inverse};
use cotrans_core::object::coupling_jacobians;
use cotrans_core::spatial::{euler_rate_jacobian, unskew, EulerAngles};
use cotrans_nmpc::fhocp::{HorizonGrid, HorizonModel, ShootingProblem};
use cotrans_nmpc::ode::rk4;
use cotrans_nmpc::sim::{integrate_step, Scenario, TraceRow};
use cotrans_nmpc::sqp::{solve, FdScheme, SqpOptions, SqpStatus};
use cotrans_nmpc::trace::{ErrorEnvelope, ENVELOPE_FRACTION};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("[PASS] {id:>2} {name}: {d} ({secs:.1} s)");
            true
        }
        Err(d) => {
            println!("[FAIL] {id:>2} {name}: {d} ({secs:.1} s)");
            false
        }
    }
}

struct PaperRun {
    scn: Scenario,
    report: RunReport,
    dir: PathBuf,
    wall: f64,
}

impl PaperRun {
    fn rows(&self) -> &[TraceRow] {
        self.report.result.as_ref().map_or(&[], |r| &r.rows)
    }
}

fn request(dir: &Path, replay: Option<PathBuf>) -> RunRequest {
    RunRequest { scenario: PathBuf::from("paper_sec5"), out: dir.to_path_buf(), replay, ..RunRequest::default() }
}

fn paper_run(dir: PathBuf) -> PaperRun {
    let req = request(&dir, None);
    let scn = load(&req).expect("bundled scenario loads");
    let started = Instant::now();
    let report = run(&req);
    PaperRun { scn, report, dir, wall: started.elapsed().as_secs_f64() }
}

fn rng() -> StdRng {
    StdRng::seed_from_u64(7)
}

/// Planar configuration with the first arm joint away from the singular set.
fn planar_sample(r: &mut StdRng) -> (DVector<f64>, DVector<f64>) {
    let a1 = r.gen_range(0.2..1.4) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
    let q = DVector::from_vec(vec![r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), a1, r.gen_range(-1.4..1.4)]);
    let qd = DVector::from_fn(4, |_, _| r.gen_range(-1.0..1.0));
    (q, qd)
}

fn floating_sample(r: &mut StdRng) -> (DVector<f64>, DVector<f64>) {
    let q = DVector::from_fn(9, |i, _| r.gen_range(-1.2..1.2) * if i == 4 { 0.9 } else { 1.0 });
    let qd = DVector::from_fn(9, |_, _| r.gen_range(-1.0..1.0));
    (q, qd)
}

// 1-4, 7: closed-loop run

fn reproduction(run: &PaperRun) -> Outcome {
    let rows = run.rows();
    let last = rows.last().ok_or("no rows")?;
    let rows_task = run.scn.team[0].task_rows();
    let pose_err = (last.object_pose.reduced(rows_task) - run.scn.x_des.reduced(rows_task)).norm();
    let env = ErrorEnvelope::from_rows(rows, ENVELOPE_FRACTION);
    let detail = format!(
        "exit {:?}, {} rows, t_end = {:.1} s, |x_O - x_des| = {pose_err:.2e}, |e| {:.2e} -> {:.2e}, transient ends at {:?} s, {} later peaks (max rise {:.2e}), wall {:.0} s",
        run.report.exit,
        rows.len(),
        last.t,
        rows[0].error_norm,
        last.error_norm,
        env.transient_end,
        env.peaks.len(),
        env.max_rise(),
        run.wall
    );
    check(
        run.report.exit == ExitCode::Ok
            && rows.len() == 601
            && pose_err <= 0.1
            && env.is_non_increasing()
            && run.wall <= 1800.0,
        detail,
    )
}

fn obstacle_avoidance(run: &PaperRun) -> Outcome {
    let rows = run.rows();
    let worst = rows.iter().map(|r| r.obstacle_function).fold(f64::NEG_INFINITY, f64::max);
    check(!rows.is_empty() && worst < 0.0, format!("max obstacle function {worst:.4e} over {} samples", rows.len()))
}

fn input_feasibility(run: &PaperRun) -> Outcome {
    let rows = run.rows();
    let worst = rows.iter().flat_map(|r| r.controls.iter()).map(|u| u.amax()).fold(0.0, f64::max);
    check(!rows.is_empty() && worst <= 8.5 + 1e-4, format!("max |u| = {worst:.6}"))
}

fn singularity_avoidance(run: &PaperRun) -> Outcome {
    let rows = run.rows();
    let mut margin = f64::INFINITY;
    let mut box_violation = f64::NEG_INFINITY;
    for r in rows {
        for (i, a) in run.scn.team.iter().enumerate() {
            margin = margin.min(r.singularity[i] - a.limits.singularity_floor);
            let alpha = a.alpha(&r.states[i].q);
            for (k, b) in a.limits.joint_boxes.iter().enumerate() {
                let b = b.as_ref().ok_or("joint box missing")?;
                box_violation = box_violation.max((b.lower - alpha[k]).max(alpha[k] - b.upper));
            }
        }
    }
    check(
        !rows.is_empty() && margin >= 0.0 && box_violation <= 1e-4,
        format!("min measure above floor {margin:.4}, worst arm-box excess {box_violation:.4e}"),
    )
}

fn grasp_consistency(run: &PaperRun) -> Outcome {
    let rows = run.rows();
    let post = rows.iter().map(|r| r.drift_after_projection).fold(0.0, f64::max);
    let pre = rows.iter().map(|r| r.drift_before_projection).fold(0.0, f64::max);
    check(
        !rows.is_empty() && post <= 1e-6 && pre <= 1e-2,
        format!("max drift after projection {post:.2e}, before {pre:.2e}"),
    )
}

// 5, 6, 9: model oracles

fn pseudo_inverse_identity() -> Outcome {
    let team = core_fixtures::team();
    let object = core_fixtures::sphere_object();
    let mut r = rng();
    let started = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..100 {
        let (q, qd) = planar_sample(&mut r);
        let t = coupled_terms(&team[k % 3], &object, &q, &qd).map_err(|e| e.to_string())?;
        let mh = right_pseudo_inverse(&t.mtilde).map_err(|e| e.to_string())?;
        worst = worst.max((&t.mtilde * mh - DMatrix::identity(4, 4)).amax());
    }
    let secs = started.elapsed().as_secs_f64();
    check(worst <= 1e-9 && secs < 1.0, format!("max |M~ M^ - I| = {worst:.2e} in {secs:.3} s"))
}

fn fd_twist(a: &AgentParams<f64>, q: &DVector<f64>, qd: &DVector<f64>) -> Vector6<f64> {
    let h = 1e-6;
    let p = forward_kinematics(a, &(q + qd * h)).unwrap();
    let m = forward_kinematics(a, &(q - qd * h)).unwrap();
    let c = forward_kinematics(a, q).unwrap();
    let v = (p.p_e - m.p_e) / (2.0 * h);
    let w = unskew(&((p.rotation - m.rotation) / (2.0 * h) * c.rotation.transpose()));
    Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
}

fn kinematic_oracles() -> Outcome {
    let mut r = rng();
    let mut jac = 0.0f64;
    let models = [(core_fixtures::planar(), false), (core_fixtures::floating(), true)];
    for (a, floating) in &models {
        for _ in 0..20 {
            let (q, qd) = if *floating { floating_sample(&mut r) } else { planar_sample(&mut r) };
            let v = geometric_jacobian(a, &q).unwrap() * &qd;
            let fd = fd_twist(a, &q, &qd);
            let fd = DVector::from_iterator(v.len(), a.task_rows().iter().map(|&k| fd[k]));
            jac = jac.max((&v - &fd).amax() / fd.amax().max(1.0));
        }
    }
    let mut det = 0.0f64;
    for _ in 0..100 {
        let e: EulerAngles<f64> =
            EulerAngles::new(r.gen_range(-3.0..3.0), r.gen_range(-1.5..1.5), r.gen_range(-3.0..3.0));
        det = det.max((euler_rate_jacobian(&e).determinant() - e.theta.cos()).abs());
    }
    let mut inv = 0.0f64;
    for a in core_fixtures::team() {
        for _ in 0..20 {
            let (q, _) = planar_sample(&mut r);
            let (j_io, j_oi) = coupling_jacobians(&a, &q).unwrap();
            inv = inv.max((j_oi * j_io - Matrix6::identity()).amax());
        }
    }
    check(
        jac <= 1e-5 && det <= 1e-12 && inv <= 1e-14,
        format!("jacobian rel err {jac:.2e}, |det J_B - cos| {det:.2e}, |J_Oi J_iO - I| {inv:.2e}"),
    )
}

fn bdot_minus_2n(a: &AgentParams<f64>, q: &DVector<f64>, qd: &DVector<f64>) -> DMatrix<f64> {
    let h = 1e-5;
    let bdot = (inertia_matrix(a, &(q + qd * h)).unwrap() - inertia_matrix(a, &(q - qd * h)).unwrap()) / (2.0 * h);
    bdot - joint_space_terms(a, q, qd).unwrap().n * 2.0
}

/// Energy change against supplied work along a torque-driven path.
fn energy_gap(a: &AgentParams<f64>, q0: DVector<f64>, tau: impl Fn(f64) -> DVector<f64>) -> f64 {
    let n = q0.len();
    let f = |t: f64, x: &DVector<f64>| {
        let q = x.rows(0, n).into_owned();
        let qd = x.rows(n, n).into_owned();
        let js = joint_space_terms(a, &q, &qd).unwrap();
        let tq = tau(t);
        let qdd = js.b.clone().cholesky().unwrap().solve(&(&tq - &js.n * &qd - &js.g));
        let mut out = DVector::zeros(2 * n + 1);
        out.rows_mut(0, n).copy_from(&qd);
        out.rows_mut(n, n).copy_from(&qdd);
        out[2 * n] = qd.dot(&tq);
        out
    };
    let energy = |x: &DVector<f64>| {
        let q = x.rows(0, n).into_owned();
        kinetic_energy(a, &q, &x.rows(n, n).into_owned()).unwrap() + potential_energy(a, &q).unwrap()
    };
    let mut x = DVector::zeros(2 * n + 1);
    x.rows_mut(0, n).copy_from(&q0);
    let e0 = energy(&x);
    let dt = 1e-3;
    for k in 0..1000 {
        let t = k as f64 * dt;
        let k1 = f(t, &x);
        let k2 = f(t + dt / 2.0, &(&x + &k1 * (dt / 2.0)));
        let k3 = f(t + dt / 2.0, &(&x + &k2 * (dt / 2.0)));
        let k4 = f(t + dt, &(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    let work = x[2 * n];
    let de = energy(&x) - e0;
    (de - work).abs() / de.abs().max(work.abs())
}

fn dynamics_properties() -> Outcome {
    let mut r = rng();
    let mut skew = 0.0f64;
    for _ in 0..20 {
        let (q, qd) = planar_sample(&mut r);
        let s = bdot_minus_2n(&core_fixtures::planar(), &q, &qd);
        skew = skew.max((&s + s.transpose()).amax());
        let (q, qd) = floating_sample(&mut r);
        let s = bdot_minus_2n(&core_fixtures::floating(), &q, &qd);
        skew = skew.max((&s + s.transpose()).amax());
    }
    let planar = energy_gap(&core_fixtures::planar(), DVector::from_vec(vec![0.2, -0.1, 0.8, 0.4]), |t| {
        DVector::from_vec(vec![(2.0 * t).sin(), 0.5 * t.cos(), 0.3 * (3.0 * t).sin(), 0.1 + 0.2 * t])
    });
    let floating = energy_gap(
        &core_fixtures::floating(),
        DVector::from_vec(vec![0.0, 0.0, 1.0, 0.1, -0.2, 0.3, 0.4, 0.5, -0.3]),
        |t| {
            DVector::from_vec(vec![
                0.5 * t.sin(),
                -0.3,
                38.0 + t.cos(),
                0.1 * t,
                0.2 * (2.0 * t).cos(),
                -0.1,
                0.3 * t.sin(),
                2.0,
                0.5 * t.cos(),
            ])
        },
    );
    let energy = planar.max(floating);

    let scn = nmpc_fixtures::team::three_agents().build().unwrap();
    let mut s = scn.initial[0].clone();
    s.qdot = DVector::from_vec(vec![0.3, -0.2, 0.4, -0.3]);
    let u = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.3]);
    let exact = integrate_step(&scn.team[0], &scn.object, &s, &u, 0.4, 1024).unwrap();
    let err = |n: usize| {
        let x = integrate_step(&scn.team[0], &scn.object, &s, &u, 0.4, n).unwrap();
        (&x.q - &exact.q).norm() + (&x.qdot - &exact.qdot).norm()
    };
    let ratio = err(4) / err(8);
    check(
        skew <= 1e-8 && energy <= 1e-6 && (12.0..=20.0).contains(&ratio),
        format!("|Bdot - 2N + (.)^T| {skew:.2e}, energy gap {energy:.2e}, RK4 ratio {ratio:.2}"),
    )
}

// 8: solver oracles

fn solver_oracles() -> Outcome {
    use nmpc_fixtures::{BoxPendulum, LinearModel};

    let model = LinearModel::oscillator();
    let mut lq = ShootingProblem::new(
        &model,
        HorizonGrid::new(0.1, 0.5).unwrap(),
        DVector::from_vec(vec![1.0, -0.5]),
        DVector::zeros(2),
    );
    lq.fd = FdScheme::Central;
    let res = solve(&lq, &DVector::zeros(10), &SqpOptions::default()).map_err(|e| e.to_string())?;
    let (us, _) = model.riccati(&lq.x0, 0.1, 5, lq.grid.substeps);
    let lq_err = (&res.z - ShootingProblem::<LinearModel>::stack(&us)).amax();
    let lq_ok = res.status == SqpStatus::Converged && lq_err <= 1e-8;

    let pend = BoxPendulum::new();
    let grid = HorizonGrid::new(0.5, 0.5).unwrap();
    let x0 = DVector::zeros(2);
    let one = ShootingProblem::new(&pend, grid, x0.clone(), DVector::zeros(2));
    let res = solve(&one, &DVector::zeros(2), &SqpOptions::default()).map_err(|e| e.to_string())?;
    let step = 1e-3;
    let n = (2.0 * pend.bound / step).round() as i64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=n {
        let a = -pend.bound + i as f64 * step;
        for j in 0..=n {
            let b = -pend.bound + j as f64 * step;
            let u = DVector::from_vec(vec![a, b]);
            let x1 = rk4::<(), _>(|s| Ok(pend.dynamics(s, &u).unwrap()), &x0, grid.h, grid.substeps).unwrap();
            let cost = pend.running_residual(0, &x0, &u).unwrap().norm_squared() * grid.h
                + pend.terminal_residual(&x1).unwrap().norm_squared();
            if cost < best.0 {
                best = (cost, a, b);
            }
        }
    }
    let gap = (res.z[0] - best.1).abs().max((res.z[1] - best.2).abs());
    let grid_ok = res.status == SqpStatus::Converged && gap <= step && res.eval.objective <= best.0 + 1e-12;
    check(
        lq_ok && grid_ok,
        format!(
            "LQ vs Riccati {lq_err:.2e}; K=1 vs grid: |du| {gap:.2e}, cost {:.6} vs {:.6}",
            res.eval.objective, best.0
        ),
    )
}

// 10: determinism

fn determinism(a: &PaperRun, b: &PaperRun) -> Outcome {
    let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let same_trace = read(a.dir.join("trace.csv"))? == read(b.dir.join("trace.csv"))?;
    let same_log = read(a.dir.join("messages.jsonl"))? == read(b.dir.join("messages.jsonl"))?;
    let replay = run(&request(&a.dir, Some(a.dir.join("messages.jsonl"))));
    let replayed: Vec<_> =
        replay.result.as_ref().map_or(vec![], |r| r.rows.iter().map(|x| x.controls.clone()).collect());
    let original: Vec<_> = a.rows().iter().map(|x| x.controls.clone()).collect();
    let same_controls = !original.is_empty() && replayed == original;
    let mismatches = replay.replay_mismatches.unwrap_or(usize::MAX);
    check(
        same_trace && same_log && same_controls && mismatches == 0,
        format!(
            "traces identical {same_trace}, message logs identical {same_log}, replayed controls identical {same_controls} ({} rows), replay mismatches {mismatches}",
            replayed.len()
        ),
    )
}

fn main() {
    let root = std::env::temp_dir().join(format!("cotrans-acceptance-{}", std::process::id()));
    let (a, b) = std::thread::scope(|s| {
        let ha = s.spawn(|| paper_run(root.join("a")));
        let hb = s.spawn(|| paper_run(root.join("b")));
        (ha.join().expect("first run"), hb.join().expect("second run"))
    });

    let results = [
        report(1, "three-agent transport converges", || reproduction(&a)),
        report(2, "object stays outside the obstacle", || obstacle_avoidance(&a)),
        report(3, "inputs within the box", || input_feasibility(&a)),
        report(4, "no singular configurations", || singularity_avoidance(&a)),
        report(5, "pseudo-inverse identity", pseudo_inverse_identity),
        report(6, "kinematic oracles", kinematic_oracles),
        report(7, "grasp consistency", || grasp_consistency(&a)),
        report(8, "solver oracles", solver_oracles),
        report(9, "dynamics properties", dynamics_properties),
        report(10, "deterministic runs and replay", || determinism(&a, &b)),
    ];
    fs::remove_dir_all(&root).ok();
    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
