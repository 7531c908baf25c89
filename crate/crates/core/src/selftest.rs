//! Fast invariant batteries behind `fedsim selftest`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{dirichlet_partition, pathological_partition, Shard};
use crate::fl::{
    compute_dt, local_objective_grad, normalized_aggregate, vanilla_aggregate, AlgorithmKind,
    ClientUpdate, HyperParams,
};
use crate::hyperbolic::{self, lift, regularizer, regularizer_grad_wrt_zp};
use crate::linalg::{dot, norm, Matrix};
use crate::nn::{finite_diff_grad, init_params, loss_and_grad, Batch, MlpSpec};
use crate::rng::derive_rng;

#[derive(Clone, Debug)]
pub struct BatteryReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

type Check = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a.abs() < 1e-8 && b.abs() < 1e-8 {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Geometry identities evaluated through the given Lorentzian inner product.
pub fn hyperbolic_battery_with(inner: fn(&[f64], &[f64]) -> f64) -> Check {
    ensure(inner(&[2.0, 1.0], &[3.0, 2.0]) == -4.0, || {
        "<(2,1),(3,2)>_L != -4".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let d = rng.random_range(1..12);
        let beta = rng.random_range(0.1..4.0);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (lz, lw) = (
            lift(&z, beta).map_err(|e| e.to_string())?,
            lift(&w, beta).map_err(|e| e.to_string())?,
        );
        let residual = inner(lz.coords(), lz.coords()) + beta;
        ensure(residual.abs() < 1e-9 * (1.0 + dot(&z, &z)), || {
            format!("off-manifold residual {residual}")
        })?;
        let dist = |a: &[f64], b: &[f64]| -2.0 * beta - 2.0 * inner(a, b);
        let (dzw, dwz) = (dist(lz.coords(), lw.coords()), dist(lw.coords(), lz.coords()));
        ensure(dzw == dwz, || "distance not symmetric".into())?;
        ensure(dzw >= -1e-9, || format!("negative distance {dzw}"))?;
        ensure(dist(lz.coords(), lz.coords()).abs() < 1e-9, || {
            "self-distance not zero".into()
        })?;
        ensure(regularizer(&z, &w, beta, 100.0).map_err(|e| e.to_string())? >= 1.0, || {
            "regularizer below 1".into()
        })?;
    }
    Ok(())
}

fn hyperbolic_battery() -> Check {
    hyperbolic_battery_with(|x, y| hyperbolic::lorentz_inner(x, y).expect("equal lengths"))
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize, classes: usize) -> Batch {
    let f = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    let l = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Matrix::from_vec(rows, cols, f).unwrap(), l).unwrap()
}

fn gradient_battery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..10 {
        let spec = MlpSpec::new(vec![3, 5, 3]).unwrap();
        let w = init_params(&spec, case);
        let g0 = init_params(&spec, case + 100);
        let b = random_batch(&mut rng, 6, 3, 3);
        let (_, g, _) = loss_and_grad(&w, &spec, &b).map_err(|e| e.to_string())?;
        let fd = finite_diff_grad(&w, 1e-5, |p| loss_and_grad(p, &spec, &b).unwrap().0);
        let worst = g.iter().zip(fd.iter()).map(|(a, c)| rel_err(*a, *c)).fold(0.0, f64::max);
        ensure(worst < 1e-4, || format!("loss gradient rel err {worst}"))?;

        let hp = HyperParams {
            gamma: 0.5,
            sigma: 100.0,
            ..Default::default()
        };
        let f = AlgorithmKind::FedMrur.features();
        let (_, g) = local_objective_grad(&w, &g0, &spec, &b, &hp, f).map_err(|e| e.to_string())?;
        let fd = finite_diff_grad(&w, 1e-5, |p| {
            local_objective_grad(p, &g0, &spec, &b, &hp, f).unwrap().0
        });
        let worst = g.iter().zip(fd.iter()).map(|(a, c)| rel_err(*a, *c)).fold(0.0, f64::max);
        ensure(worst < 1e-4, || format!("regularized gradient rel err {worst}"))?;

        let zp: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let zg: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = regularizer_grad_wrt_zp(&zp, &zg, 1.0, 100.0).map_err(|e| e.to_string())?;
        let fd = finite_diff_grad(&zp, 1e-6, |z| regularizer(z, &zg, 1.0, 100.0).unwrap());
        let worst = g.iter().zip(fd.iter()).map(|(a, c)| rel_err(*a, *c)).fold(0.0, f64::max);
        ensure(worst < 1e-6, || format!("regularizer gradient rel err {worst}"))?;
    }
    Ok(())
}

fn aggregation_battery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let s = rng.random_range(2..=10);
        let dim = rng.random_range(2..=64);
        let ups: Vec<ClientUpdate> = (0..s)
            .map(|_| ClientUpdate::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let n = normalized_aggregate(&ups).map_err(|e| e.to_string())?;
        let v = vanilla_aggregate(&ups).map_err(|e| e.to_string())?;
        let mean_norm = ups.iter().map(|u| u.norm()).sum::<f64>() / s as f64;
        ensure(rel_err(norm(&n), mean_norm) < 1e-12, || "normalized norm identity".into())?;
        let cos = dot(&n, &v) / (norm(&n) * norm(&v));
        ensure((cos - 1.0).abs() < 1e-12, || format!("direction cosine {cos}"))?;
        ensure(norm(&n) >= norm(&v), || "normalized shorter than vanilla".into())?;
        let dt = compute_dt(&ups).ok_or("undefined d_t")?;
        ensure(dt >= 1.0 - 1e-12, || format!("d_t {dt} below 1"))?;
    }
    let ups = [ClientUpdate::new(vec![1.0, 0.0]), ClientUpdate::new(vec![0.0, 1.0])];
    let n = norm(&normalized_aggregate(&ups).unwrap());
    let v = norm(&vanilla_aggregate(&ups).unwrap());
    ensure((n - 1.0).abs() < 1e-12 && (v - 0.5f64.sqrt()).abs() < 1e-12, || {
        format!("hand values {n} / {v}")
    })
}

fn exact_cover(shards: &[Shard], n: usize) -> bool {
    let mut seen = vec![false; n];
    for s in shards {
        for &i in &s.indices {
            if seen[i] {
                return false;
            }
            seen[i] = true;
        }
    }
    seen.into_iter().all(|b| b)
}

fn partition_battery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..200 {
        let n = rng.random_range(30..300);
        let classes = rng.random_range(2..10);
        let clients = rng.random_range(1..10);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        if let Ok(shards) = dirichlet_partition(&labels, classes, clients, 0.5, 1, seed) {
            ensure(exact_cover(&shards, n), || "dirichlet partition not exact".into())?;
        }
        let per = rng.random_range(1..=classes);
        if per * clients >= classes {
            if let Ok(shards) = pathological_partition(&labels, classes, clients, per, seed) {
                ensure(exact_cover(&shards, n), || "pathological partition not exact".into())?;
            }
        }
    }
    Ok(())
}

fn rng_battery() -> Check {
    let mut a = derive_rng(9, 4, 2);
    let mut b = derive_rng(9, 4, 2);
    for _ in 0..100 {
        ensure(a.random::<u64>() == b.random::<u64>(), || "stream not reproducible".into())?;
    }
    let x: u64 = derive_rng(9, 4, 2).random();
    let y: u64 = derive_rng(9, 4, 3).random();
    ensure(x != y, || "neighbouring client streams collide".into())
}

type Battery = (&'static str, fn() -> Check);

pub fn run_all() -> Vec<BatteryReport> {
    let checks: [Battery; 5] = [
        ("hyperbolic", hyperbolic_battery),
        ("gradient", gradient_battery),
        ("aggregation", aggregation_battery),
        ("partition", partition_battery),
        ("rng", rng_battery),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let res = f();
            BatteryReport {
                name,
                passed: res.is_ok(),
                detail: res.err().unwrap_or_default(),
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_batteries_pass() {
        let reports = run_all();
        assert!(reports.len() >= 4);
        for r in &reports {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn sign_flipped_inner_product_fails_hyperbolic_battery() {
        let flipped: fn(&[f64], &[f64]) -> f64 =
            |x, y| x[0] * y[0] - dot(&x[1..], &y[1..]);
        assert!(hyperbolic_battery_with(flipped).is_err());
    }
}
