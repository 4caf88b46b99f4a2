//! Acceptance criteria 1–9. Each prints one PASS/FAIL line; the process
//! fails if any criterion fails or exceeds its time limit.

use std::time::{Duration, Instant};

use brakekit::dynamics::{integrate_twisted, verify_conjugacy, IntegratorOptions};
use brakekit::index::{
    fourier_morse_oracle, linearize, mean_index, morse_index_on_grid, morse_index_stable, verify_relations,
    ConstantB, IndexPair, RelationOptions, RelationsReport,
};
use brakekit::legendre::{fenchel_l_from_h, hamiltonian_of};
use brakekit::loopspace::{full_gradient_check, hessian, mean_action, Space, SymmetricLoop};
use brakekit::model::{LagrangianSpec, OneForm, PhasePoint, TWO_PI};
use brakekit::system::{builtin, builtin_systems, SystemSpec};
use brakekit_cli::config::{Config, Numerics};
use brakekit_cli::find::{find_orbits, SHOOTING, VARIATIONAL};
use brakekit_cli::homotopy::{bangert, BangertArgs, FamilyFile, FamilySource};
use brakekit_cli::modify::{modify_check, speed_list};
use brakekit_cli::store::{write_json, OrbitRecord, Store};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config(name: &str) -> Config {
    Config::new(builtin(name).expect("built-in system"), Numerics::default()).expect("valid built-in config")
}

struct Campaign {
    _dir: tempfile::TempDir,
    store: Store,
}

impl Campaign {
    fn orbits(&self, name: &str) -> Vec<OrbitRecord> {
        self.store.orbits_of(&config(name).system_id()).unwrap_or_default()
    }
}

fn near(a: f64, b: f64) -> bool {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d) < 1e-6
}

fn constant_at(records: &[OrbitRecord], q: f64) -> Option<&OrbitRecord> {
    records.iter().find(|r| r.constant && near(r.curve.half_node(0)[0], q))
}

fn c1_duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (name, spec) in builtin_systems() {
        let sys = spec.build().map_err(|e| format!("{name}: {e}"))?;
        let n = spec.dim;
        let zero = OneForm::zero(n);
        for l in [&sys.l_theta, &sys.lagrangian] {
            let h = hamiltonian_of(l, &zero);
            for _ in 0..1000 {
                let t: f64 = rng.random();
                let q: Vec<f64> = sys.torus.periods.iter().map(|p| p * rng.random::<f64>()).collect();
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (back, _) = fenchel_l_from_h(&h, t, &q, &v).map_err(|e| format!("{name}: {e}"))?;
                worst = worst.max((back - l.value(t, &q, &v)).abs());
                count += 1;
            }
        }
    }
    ensure(worst < 1e-9, || format!("biconjugation error {worst:.2e}"))?;
    Ok(format!("max |L** - L| = {worst:.2e} over {count} samples"))
}

fn c2_conjugacy() -> Outcome {
    let opts = IntegratorOptions::with_tol(1e-12);
    // T¹, L_θ = v²/2 and constant θ = c: the twisted flow of H = (p+c)²/2 is
    // q(t) = q₀ + (p₀ + c)t with p constant
    let c = 0.3;
    let spec = SystemSpec {
        dim: 1,
        periods: None,
        theta: Some(vec![format!("{c}")]),
        lagrangian: brakekit::system::LagrangianConfig::Kinetic,
    };
    let sys = spec.build().map_err(|e| e.to_string())?;
    let mut closed: f64 = 0.0;
    for (q0, p0) in [(0.1, 0.4), (0.7, -1.2), (0.35, 0.0)] {
        let x = PhasePoint { q: vec![q0], p: vec![p0] };
        let tr = integrate_twisted(&sys.hamiltonian, &sys.theta, &x, 0.0, 1.0, &opts).map_err(|e| e.to_string())?;
        for i in 0..=64 {
            let t = i as f64 / 64.0;
            let s = tr.state(t);
            closed = closed.max((s[0] - (q0 + (p0 + c) * t)).abs()).max((s[1] - p0).abs());
        }
    }
    let t1 = verify_conjugacy(&sys.hamiltonian, &sys.theta, 1.0, 16, &opts).map_err(|e| e.to_string())?;
    let t2sys = config("magnetic-t2").system;
    let t2 = verify_conjugacy(&t2sys.hamiltonian, &t2sys.theta, 1.0, 16, &opts).map_err(|e| e.to_string())?;
    ensure(closed < 1e-6 && t1 < 1e-6 && t2 < 1e-6, || {
        format!("closed form {closed:.2e}, T1 {t1:.2e}, T2 {t2:.2e}")
    })?;
    Ok(format!("T1 closed form {closed:.2e}, T1 conjugacy {t1:.2e}, T2 conjugacy {t2:.2e}"))
}

fn c3_brake_orbits(camp: &Campaign) -> Outcome {
    let mut total = 0;
    let mut worst_brake: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for (name, spec) in builtin_systems() {
        let cfg = Config::new(spec, Numerics::default()).map_err(|e| e.message)?;
        find_orbits(&cfg, &camp.store).map_err(|e| format!("{name}: {}", e.message))?;
        for rec in camp.orbits(name) {
            let g = full_gradient_check(&cfg.system.l_theta, &rec.curve).map_err(|e| e.to_string())?;
            ensure(rec.brake_residual < 1e-6 && g < 1e-6, || {
                format!("{name} orbit {}: brake residual {:.2e}, full gradient {g:.2e}", &rec.id[..8], rec.brake_residual)
            })?;
            worst_brake = worst_brake.max(rec.brake_residual);
            worst_grad = worst_grad.max(g);
            total += 1;
        }
    }
    let both: Vec<OrbitRecord> = camp
        .orbits("magnetic-pendulum")
        .into_iter()
        .filter(|r| !r.constant && r.methods.iter().any(|m| m == SHOOTING) && r.methods.iter().any(|m| m == VARIATIONAL))
        .collect();
    let best = both.iter().map(|r| r.cross_agreement).fold(f64::INFINITY, f64::min);
    ensure(best < 1e-5, || format!("no non-constant magnetic pendulum orbit found by both methods (best {best:.2e})"))?;
    Ok(format!(
        "{total} orbits, brake residual <= {worst_brake:.2e}, full gradient <= {worst_grad:.2e}; magnetic pendulum agreement {best:.2e}"
    ))
}

fn oracle_check(l: &LagrangianSpec, g: &SymmetricLoop, rep: &RelationsReport) -> Result<(), String> {
    let c = linearize(l, g);
    for it in &rep.iterates {
        for (space, got) in [(Space::Full, it.morse_full), (Space::Symmetric, it.morse_sym)] {
            let want = fourier_morse_oracle(&c.p[0], &c.q[0], &c.r[0], (it.k * g.period) as f64, space);
            ensure(got == want, || format!("k={} {space:?}: Morse {got:?}, Fourier {want:?}", it.k))?;
        }
    }
    Ok(())
}

fn c4_identities(camp: &Campaign) -> Outcome {
    let opts = RelationOptions::default();
    let pend = camp.orbits("pendulum");
    let free = camp.orbits("free");
    let l_pend = config("pendulum").system.l_theta;
    let l_free = config("free").system.l_theta;
    let cases = [
        ("pendulum q=0", &l_pend, constant_at(&pend, 0.0)),
        ("pendulum q=1/2", &l_pend, constant_at(&pend, 0.5)),
        ("free", &l_free, free.iter().find(|r| r.constant)),
    ];
    let mut lines = vec![];
    for (label, l, rec) in cases {
        let rec = rec.ok_or_else(|| format!("{label}: constant loop not in store"))?;
        let rep = verify_relations(l, &rec.curve, &[1, 2, 4], &opts).map_err(|e| format!("{label}: {e}"))?;
        let identities: Vec<_> = rep.failures().into_iter().filter(|(_, n)| n.contains(" = ")).collect();
        ensure(identities.is_empty(), || format!("{label}: {identities:?}"))?;
        oracle_check(l, &rec.curve, &rep).map_err(|e| format!("{label}: {e}"))?;
        let k1 = &rep.iterates[0];
        lines.push(format!("{label} k=1 full {:?} sym {:?}", pair(k1.morse_full), pair(k1.morse_sym)));
        if label == "pendulum q=1/2" {
            // R = −(2π)²: the constant mode is negative and the first cosine mode is null
            ensure(k1.morse_full == IndexPair::new(1, 2) && k1.morse_sym == IndexPair::new(1, 1), || {
                format!("{label}: k=1 full {:?} sym {:?}", k1.morse_full, k1.morse_sym)
            })?;
        }
    }
    Ok(lines.join("; "))
}

fn pair(p: IndexPair) -> (i64, usize) {
    (p.index, p.nullity)
}

fn c5_inequalities(camp: &Campaign) -> Outcome {
    let opts = RelationOptions::default();
    let ks: Vec<usize> = (1..=8).collect();
    let mut checked = 0;
    for (name, _) in builtin_systems() {
        let l = config(name).system.l_theta;
        for rec in camp.orbits(name) {
            let rep = verify_relations(&l, &rec.curve, &ks, &opts).map_err(|e| format!("{name} {}: {e}", &rec.id[..8]))?;
            let bad: Vec<_> = rep.failures().into_iter().filter(|(_, n)| !n.contains(" = ")).collect();
            ensure(bad.is_empty(), || format!("{name} {}: {bad:?}", &rec.id[..8]))?;
            checked += rep.iterates.iter().map(|r| r.checks.len()).sum::<usize>();
        }
    }
    Ok(format!("{checked} checks over every stored orbit, k = 1..8"))
}

fn c6_mean_index() -> Outcome {
    let mut parts = vec![];
    for (label, b) in [("harmonic", 1.0), ("free", 0.0)] {
        let field = ConstantB(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, b]));
        let m = mean_index(&field, 1.0, 64, 1e-12).map_err(|e| e.to_string())?;
        let rel = (m.l0 - m.cz / 2.0).abs() / m.cz.max(0.01);
        ensure(rel < 0.05, || format!("{label}: mean {:.4}, L0 mean {:.4}, relative gap {rel:.3}", m.cz, m.l0))?;
        parts.push(format!("{label} {:.4}/{:.4} gap {rel:.3}", m.cz, m.l0));
    }
    Ok(parts.join("; "))
}

fn c7_modification(camp: &Campaign) -> Outcome {
    let mut orbits = 0;
    let mut worst_grad: f64 = 0.0;
    let mut worst_hess: f64 = 0.0;
    for (name, _) in builtin_systems() {
        let cfg = config(name);
        if camp.orbits(name).is_empty() {
            continue;
        }
        let speeds = speed_list(&cfg, &camp.store, &[]).map_err(|e| e.message)?;
        let cert = modify_check(&cfg, &camp.store, &speeds).map_err(|e| format!("{name}: {}", e.message))?;
        for r in &cert.speeds {
            ensure(r.coincidence <= 1e-12 && r.coincidence_samples > 0, || {
                format!("{name} T={}: coincidence {:.2e} on {} samples", r.t, r.coincidence, r.coincidence_samples)
            })?;
            ensure(r.growth_floor >= 0.0 && r.growth.passed, || format!("{name} T={}: growth floor {:.2e}", r.t, r.growth_floor))?;
        }
        for rec in camp.orbits(name) {
            let rows: Vec<_> = cert.orbits.iter().filter(|o| o.orbit_id == rec.id).collect();
            let admitted: Vec<_> = rows.iter().filter_map(|o| o.preservation.as_ref()).collect();
            ensure(admitted.len() >= 2, || format!("{name} {}: fewer than two admissible speeds", &rec.id[..8]))?;
            for p in admitted {
                ensure(p.gradient_norm < 1e-10 && p.action == p.base_action, || {
                    format!("{name} {} T={}: gradient {:.2e}", &rec.id[..8], p.t, p.gradient_norm)
                })?;
                worst_grad = worst_grad.max(p.gradient_norm);
            }
            let pairs: Vec<_> = cert.pairs.iter().filter(|p| p.orbit_id == rec.id).collect();
            ensure(!pairs.is_empty(), || format!("{name} {}: no Hessian comparison", &rec.id[..8]))?;
            for p in pairs {
                let c = &p.comparison;
                ensure(c.max_deviation < 1e-12 && c.indices_agree(), || {
                    format!("{name} {}: Hessian deviation {:.2e}, pairs {:?} {:?}", &rec.id[..8], c.max_deviation, c.full, c.symmetric)
                })?;
                worst_hess = worst_hess.max(c.max_deviation);
            }
            orbits += 1;
        }
    }
    Ok(format!("{orbits} orbits; preservation gradient <= {worst_grad:.2e}, Hessian deviation <= {worst_hess:.2e}"))
}

fn c8_bangert(camp: &Campaign) -> Outcome {
    let name = "magnetic-pendulum";
    let cfg = config(name);
    let recs = camp.orbits(name);
    let base = constant_at(&recs, 0.0).ok_or("constant orbit at 0 missing")?;
    let other = constant_at(&recs, 0.5).ok_or("constant orbit at 1/2 missing")?;
    let moving = recs.iter().find(|r| !r.constant).ok_or("non-constant orbit missing")?;
    let file = camp.store.root.join("constant-family.json");
    let fam = FamilyFile { x0: 0.0, x1: 1.0, nodes: vec![base.curve.clone(), base.curve.clone()] };
    write_json(&file, &fam).map_err(|e| e.message)?;
    let args = BangertArgs { ns: vec![2, 4, 8], c1: None, c2: None, epsilon: 0.05 };
    let sources = [
        ("constant", FamilySource::File(&file)),
        ("two-constant", FamilySource::Orbits(&base.id, &other.id)),
        ("moving", FamilySource::Orbits(&base.id, &moving.id)),
    ];
    let mut parts = vec![];
    for (label, src) in sources {
        let m = bangert(&cfg, &camp.store, &src, &args).map_err(|e| format!("{label}: {}", e.message))?;
        ensure(m.rows.iter().map(|r| r.n).eq([2, 4, 8]), || format!("{label}: rows {:?}", m.rows.len()))?;
        for r in &m.rows {
            ensure(r.all_even && r.end_matches_iterate && r.bound.holds, || format!("{label} n={}: {r:?}", r.n))?;
        }
        ensure(!m.homotopy.is_empty(), || format!("{label}: no homotopy run"))?;
        for h in &m.homotopy {
            ensure(h.n >= m.n_bar && h.certified, || format!("{label} n={}: {h:?}", h.n))?;
        }
        parts.push(format!("{label} C={:.2e} n̄={}", m.constants.c_theta, m.n_bar));
    }
    Ok(parts.join("; "))
}

/// Composite Simpson rule with `2m` intervals on `[0, 1]`.
fn simpson(f: impl Fn(f64) -> f64, m: usize) -> f64 {
    let h = 1.0 / (2 * m) as f64;
    let inner: f64 = (1..2 * m).map(|i| f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(0.0) + inner + f(1.0)) * h / 3.0
}

fn c9_convergence(camp: &Campaign) -> Outcome {
    let q = |t: f64| 0.2 + 0.15 * (TWO_PI * t).cos() + 0.05 * (2.0 * TWO_PI * t).cos();
    let dq = |t: f64| -0.15 * TWO_PI * (TWO_PI * t).sin() - 0.1 * TWO_PI * (2.0 * TWO_PI * t).sin();
    let xi = |t: f64| (TWO_PI * t).cos() + 0.5 * (TWO_PI * t).sin();
    let dxi = |t: f64| TWO_PI * (-(TWO_PI * t).sin() + 0.5 * (TWO_PI * t).cos());
    let mut worst_ratio = f64::INFINITY;
    for name in ["pendulum", "magnetic-pendulum", "quartic", "forced"] {
        let l = config(name).system.l_theta;
        let exact_action = simpson(|t| l.value(t, &[q(t)], &[dq(t)]), 20_000);
        let exact_hess = simpson(
            |t| {
                let j = l.jet(t, &[q(t)], &[dq(t)]);
                j.dww[(0, 0)] * dxi(t).powi(2) + 2.0 * j.dqw[(0, 0)] * xi(t) * dxi(t) + j.dqq[(0, 0)] * xi(t).powi(2)
            },
            20_000,
        );
        let errors = |grid: usize| -> Result<(f64, f64), String> {
            let g = SymmetricLoop::from_fn(1, 1, grid, |t| vec![q(t)]).map_err(|e| e.to_string())?;
            let x = DVector::from_iterator(grid, (0..grid).map(|j| xi(j as f64 / grid as f64)));
            let h = hessian(&l, &g, Space::Full);
            Ok(((mean_action(&l, &g) - exact_action).abs(), (x.dot(&h.mul_vec(&x)) - exact_hess).abs()))
        };
        let errs: Vec<(f64, f64)> = [64, 128, 256].into_iter().map(errors).collect::<Result<_, _>>()?;
        for w in errs.windows(2) {
            let (ra, rh) = (w[0].0 / w[1].0, w[0].1 / w[1].1);
            ensure(ra >= 3.5 && rh >= 3.5, || format!("{name}: action ratio {ra:.2}, Hessian ratio {rh:.2}"))?;
            worst_ratio = worst_ratio.min(ra).min(rh);
        }
    }
    let mut stable = 0;
    for (name, _) in builtin_systems() {
        let l = config(name).system.l_theta;
        for rec in camp.orbits(name) {
            for space in [Space::Full, Space::Symmetric] {
                let (p, grid) = morse_index_stable(&l, &rec.curve, 2, space, 4).map_err(|e| format!("{name}: {e}"))?;
                let coarse = rec.curve.resample(grid / 2).map_err(|e| e.to_string())?;
                let before = morse_index_on_grid(&l, &coarse, 2, space).map_err(|e| e.to_string())?;
                ensure(before == p, || format!("{name} {}: {before:?} then {p:?}", &rec.id[..8]))?;
                stable += 1;
            }
        }
    }
    Ok(format!("smallest halving ratio {worst_ratio:.2}; {stable} index pairs stable over the last two grids"))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary store");
    let store = Store::open(dir.path()).expect("store opens");
    let camp = Campaign { _dir: dir, store };
    let criteria: Vec<(usize, &str, u64, Box<dyn Fn(&Campaign) -> Outcome>)> = vec![
        (1, "duality roundtrip", 5, Box::new(|_| c1_duality())),
        (2, "momentum-shift conjugacy", 30, Box::new(|_| c2_conjugacy())),
        (3, "brake symmetry", 120, Box::new(c3_brake_orbits)),
        (4, "index identities", 120, Box::new(c4_identities)),
        (5, "index inequalities", 120, Box::new(c5_inequalities)),
        (6, "mean-index relation", 60, Box::new(|_| c6_mean_index())),
        (7, "modification certificates", 60, Box::new(c7_modification)),
        (8, "Bangert suite", 180, Box::new(c8_bangert)),
        (9, "convergence order", 120, Box::new(c9_convergence)),
    ];
    let mut failed = vec![];
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let res = f(&camp);
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let (ok, detail) = match res {
            Ok(d) if in_time => (true, d),
            Ok(d) => (false, format!("{d}; over the time limit")),
            Err(e) => (false, e),
        };
        println!(
            "criterion {n} {name}: {} ({detail}) [{:.1}s / {limit}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        if !ok {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
