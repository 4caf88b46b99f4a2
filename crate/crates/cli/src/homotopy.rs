//! `bangert`: `θ^{⟨2n⟩}` dumps, the action-bound table and the homotopy certificates.

use std::path::Path;

use brakekit::bangert::{
    bangert_homotopy, build_theta_2n, c_sigma, n_bar, ActionBoundRow, FamilyConstants, HomotopyOptions, LoopFamily,
    Simplex,
};
use brakekit::loopspace::{mean_action, SymmetricLoop};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::failure::{code, Failure};
use crate::report::check_integrity;
use crate::store::{content_hash, read_json, Store};

/// An explicit sampled family: node loops at equally spaced `x`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyFile {
    pub x0: f64,
    pub x1: f64,
    pub nodes: Vec<SymmetricLoop>,
}

pub enum FamilySource<'a> {
    Orbits(&'a str, &'a str),
    File(&'a Path),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NRow {
    pub n: usize,
    pub bound: ActionBoundRow,
    pub junction_gap: f64,
    pub end_matches_iterate: bool,
    pub all_even: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomotopyRow {
    pub n: usize,
    pub cond_i: bool,
    pub cond_ii: bool,
    pub cond_iii: bool,
    pub below_c2: bool,
    pub all_even: bool,
    pub certified: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BangertManifest {
    pub system_id: String,
    pub family: String,
    pub constants: FamilyConstants,
    pub rows: Vec<NRow>,
    pub c_sigma: f64,
    pub n_bar: usize,
    pub c1: f64,
    pub c2: f64,
    pub epsilon: f64,
    pub homotopy: Vec<HomotopyRow>,
    pub all_pass: bool,
}

#[derive(Clone, Debug)]
pub struct BangertArgs {
    pub ns: Vec<usize>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub epsilon: f64,
}

fn load_family(cfg: &Config, store: &Store, source: &FamilySource<'_>) -> Result<(String, LoopFamily), Failure> {
    let torus = cfg.system.torus.clone();
    match source {
        FamilySource::Orbits(a, b) => {
            let (ra, rb) = (store.orbit(a)?, store.orbit(b)?);
            check_integrity(cfg, &ra)?;
            check_integrity(cfg, &rb)?;
            let (g0, g1) = (ra.curve, rb.curve);
            if g0.period != 1 || g1.period != 1 || g0.grid != g1.grid {
                return Err(Failure::schema("family orbits must have period 1 and a common grid"));
            }
            let shift: Vec<f64> = g0
                .half_node(0)
                .iter()
                .zip(g1.half_node(0))
                .zip(&torus.periods)
                .map(|((x, y), l)| l * ((x - y) / l).round())
                .collect();
            let fam = LoopFamily::from_nodes(torus, 0.0, 1.0, vec![g0, g1.translate(&shift)])?;
            Ok((format!("orbits {} {}", ra.id, rb.id), fam))
        }
        FamilySource::File(path) => {
            let f: FamilyFile = read_json(path)?;
            if f.nodes.iter().any(|g| g.dim != cfg.spec.dim) {
                return Err(Failure::schema("family nodes have the wrong dimension"));
            }
            let fam = LoopFamily::from_nodes(torus, f.x0, f.x1, f.nodes)?;
            Ok((format!("file {}", path.display()), fam))
        }
    }
}

pub fn bangert(cfg: &Config, store: &Store, source: &FamilySource<'_>, args: &BangertArgs) -> Result<BangertManifest, Failure> {
    if args.ns.is_empty() || args.ns.iter().any(|n| *n < 2) {
        return Err(Failure::schema("n values must be at least 2"));
    }
    if !(args.epsilon > 0.0) {
        return Err(Failure::schema("ε must be positive"));
    }
    let l = &cfg.system.l_theta;
    let (label, family) = load_family(cfg, store, source)?;
    let key = content_hash(&format!("{}\n{label}\n{:?}\n{:?}", cfg.system_id(), args.ns, (args.c1, args.c2, args.epsilon)));
    let dir = format!("bangert/{}", &key[..16]);

    let mut rows = vec![];
    let mut constants = None;
    for &n in &args.ns {
        let out = build_theta_2n(l, &family, n)?;
        for (k, g) in out.loops.iter().enumerate() {
            store.write_text(&format!("{dir}/loops/n{n}/x{k:02}.csv"), &g.to_csv())?;
        }
        let m = out.constants.endpoint_max;
        let bound = ActionBoundRow {
            n,
            max_excess: out.samples.iter().map(|s| s.action - m).fold(f64::NEG_INFINITY, f64::max),
            c_theta_over_2n: out.constants.c_theta / (2 * n) as f64,
            holds: out.bound_holds(),
        };
        rows.push(NRow {
            n,
            bound,
            junction_gap: out.junction_gap,
            end_matches_iterate: out.end_matches_iterate,
            all_even: out.all_even(),
        });
        constants = Some(out.constants);
    }
    let constants = constants.expect("at least one n");

    let (x0, x1) = (family.x0, family.x1);
    let fam = family.clone();
    let sigma = Simplex::new(1, cfg.system.torus.clone(), move |z| fam.at(x0 + z[0] * (x1 - x0)))?;
    let opts = HomotopyOptions::default();
    let cs = c_sigma(l, &sigma, &opts)?;
    let nb = n_bar(cs, args.epsilon);
    let sup = sigma.grid(opts.side).iter().map(|z| mean_action(l, &sigma.at(z))).fold(f64::NEG_INFINITY, f64::max);
    let c1 = args.c1.unwrap_or(constants.endpoint_max + 2.0 * args.epsilon);
    let c2 = args.c2.unwrap_or(sup.max(c1) + cs.max(0.0) + 1.0);
    let mut hn: Vec<usize> = args.ns.iter().cloned().filter(|n| *n >= nb.max(2)).collect();
    if hn.is_empty() {
        hn.push(nb.max(2));
    }
    let mut homotopy = vec![];
    for n in hn {
        let keep = HomotopyOptions { keep_loops: true, ..opts.clone() };
        let rep = bangert_homotopy(l, &sigma, n, c1, c2, args.epsilon, &keep)?;
        for (smp, g) in rep.samples.iter().zip(&rep.loops) {
            let zi = (smp.z[0] * opts.side as f64).round() as usize;
            if zi % 8 == 0 && (smp.s * 2.0).fract() == 0.0 {
                store.write_text(&format!("{dir}/homotopy/n{n}/s{:.2}_z{zi:02}.csv", smp.s), &g.to_csv())?;
            }
        }
        homotopy.push(HomotopyRow {
            n,
            cond_i: rep.cond_i,
            cond_ii: rep.cond_ii,
            cond_iii: rep.cond_iii,
            below_c2: rep.below_c2,
            all_even: rep.all_even,
            certified: rep.certified(),
        });
    }
    let all_pass = rows.iter().all(|r| r.bound.holds && r.end_matches_iterate && r.all_even)
        && homotopy.iter().all(|h| h.certified);
    let manifest = BangertManifest {
        system_id: cfg.system_id(),
        family: label,
        constants,
        rows,
        c_sigma: cs,
        n_bar: nb,
        c1,
        c2,
        epsilon: args.epsilon,
        homotopy,
        all_pass,
    };
    store.write(&format!("{dir}/manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn bangert_status(m: &BangertManifest) -> Result<(), Failure> {
    if m.all_pass {
        Ok(())
    } else {
        Err(Failure::new(code::ACTION_BOUND, "action bound or homotopy certificate failed; see manifest".to_string()))
    }
}
