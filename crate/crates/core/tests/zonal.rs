use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zonalclim_core::geom::{build_coverage, CoverageMatrix, Level, Polygon, Region, RegionSet};
use zonalclim_core::grid::{Frequency, GridSpec, Raster, RasterSeries, Registration, Timestamp, Variable};
use zonalclim_core::weights::{unweighted, WeightGrid, WeightKind};
use zonalclim_core::zonal::{aggregate, aggregate_series};

struct Instance {
    spec: GridSpec,
    cov: CoverageMatrix,
    w: WeightGrid,
    x: Raster,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..=20);
    let cols = rng.gen_range(1..=20);
    let cs = [0.25, 0.5, 1.0][rng.gen_range(0..3)];
    let spec = GridSpec::new(rows, cols, -10.0, 40.0, cs, Registration::Corner).unwrap();
    let (w0, n0) = (spec.outer_west(), spec.outer_north());
    let (e0, s0) = (w0 + cols as f64 * cs, n0 - rows as f64 * cs);
    let n_regions = rng.gen_range(1..=5);
    let regions = (0..n_regions)
        .map(|k| {
            let mut span = |lo: f64, hi: f64| {
                let a = rng.gen_range(lo - cs..hi + cs);
                let b = rng.gen_range(lo - cs..hi + cs);
                (a.min(b), a.max(b) + 1e-3)
            };
            let (x0, x1) = span(w0, e0);
            let (y0, y1) = span(s0, n0);
            Region::new(format!("R{k}"), "r", Level::L0, vec![Polygon::rect(x0, y0, x1, y1)])
        })
        .collect();
    let cov = build_coverage(&spec, &RegionSet::new(Level::L0, regions).unwrap());
    let weights = (0..spec.n_cells())
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..100.0) })
        .collect();
    let w = WeightGrid::new(spec, weights, WeightKind::Population, Some(2010)).unwrap();
    let values = (0..spec.n_cells())
        .map(|_| if rng.gen_bool(0.15) { f64::NAN } else { rng.gen_range(-30.0..40.0) })
        .collect();
    let x = Raster::new(spec, values, Variable::Temperature, Timestamp::month(2001, 5).unwrap()).unwrap();
    Instance { spec, cov, w, x }
}

/// Loops over every cell of the grid for every region.
fn dense(inst: &Instance) -> Vec<Option<f64>> {
    let spec = &inst.spec;
    inst.cov
        .regions()
        .iter()
        .map(|rc| {
            let mut f = vec![0.0; spec.n_cells()];
            for e in &rc.entries {
                f[spec.index(e.row as usize, e.col as usize)] = e.fraction;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for row in 0..spec.n_rows() {
                let a = spec.cell_area(row).unwrap();
                for col in 0..spec.n_cols() {
                    let j = spec.index(row, col);
                    if let Some(x) = inst.x.get(row, col) {
                        let m = a * f[j] * inst.w.values()[j];
                        num += m * x;
                        den += m;
                    }
                }
            }
            (den > 0.0).then(|| num / den)
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn values(inst: &Instance, x: &Raster, w: &WeightGrid) -> Vec<Option<f64>> {
    aggregate(x, &inst.cov, w).unwrap().into_iter().map(|(_, v)| v).collect()
}

fn map(x: &Raster, f: impl Fn(f64) -> f64) -> Raster {
    let v = x.values().iter().map(|&v| if v.is_nan() { v } else { f(v) }).collect();
    Raster::new(*x.spec(), v, x.variable(), x.timestamp()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sparse_matches_dense(seed in any::<u64>()) {
        let inst = instance(seed);
        let got = values(&inst, &inst.x, &inst.w);
        let want = dense(&inst);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            match (g, w) {
                (Some(g), Some(w)) => prop_assert!(close(*g, *w, 1e-12), "{} vs {}", g, w),
                (None, None) => {}
                _ => prop_assert!(false, "missing mismatch: {:?} vs {:?}", g, w),
            }
        }
    }

    #[test]
    fn algebraic_invariants(seed in any::<u64>(), lambda in 1e-3f64..1e3, c in -50.0f64..50.0) {
        let inst = instance(seed);
        let base = values(&inst, &inst.x, &inst.w);
        let scaled_w = WeightGrid::new(
            inst.spec,
            inst.w.values().iter().map(|v| v * lambda).collect(),
            WeightKind::Population,
            Some(2010),
        ).unwrap();
        let by_w = values(&inst, &inst.x, &scaled_w);
        let by_x = values(&inst, &map(&inst.x, |v| v * lambda), &inst.w);
        let shifted = values(&inst, &map(&inst.x, |v| v + c), &inst.w);
        for (i, rc) in inst.cov.regions().iter().enumerate() {
            let Some(y) = base[i] else {
                prop_assert!(by_w[i].is_none() && by_x[i].is_none() && shifted[i].is_none());
                continue;
            };
            prop_assert!(close(by_w[i].unwrap(), y, 1e-12));
            prop_assert!(close(by_x[i].unwrap(), lambda * y, 1e-12));
            prop_assert!(close(shifted[i].unwrap(), y + c, 1e-12));
            let xs: Vec<f64> = rc.entries.iter()
                .filter(|e| inst.w.get(e.row as usize, e.col as usize) > 0.0)
                .filter_map(|e| inst.x.get(e.row as usize, e.col as usize))
                .collect();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= y && y <= hi);
        }
    }

    #[test]
    fn uniform_field_is_reproduced(seed in any::<u64>(), c in -100.0f64..100.0) {
        let inst = instance(seed);
        let x = map(&inst.x, |_| c);
        for y in values(&inst, &x, &inst.w).into_iter().flatten() {
            prop_assert!(close(y, c, 1e-12));
        }
    }

    #[test]
    fn unweighted_is_area_fraction_mean(seed in any::<u64>()) {
        let inst = instance(seed);
        let w = unweighted(&inst.spec);
        let got = values(&inst, &inst.x, &w);
        for (i, rc) in inst.cov.regions().iter().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for e in &rc.entries {
                if let Some(x) = inst.x.get(e.row as usize, e.col as usize) {
                    num += e.area * e.fraction * x;
                    den += e.area * e.fraction;
                }
            }
            match got[i] {
                Some(y) => prop_assert!(close(y, num / den, 1e-12)),
                None => prop_assert!(den == 0.0),
            }
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let inst = instance(42);
    let frames = (1..=12u32)
        .map(|m| {
            let x = map(&inst.x, |v| v * m as f64 + 0.1);
            x.with_timestamp(Timestamp::month(2001, m).unwrap())
        })
        .collect();
    let xs = RasterSeries::new(inst.spec, Variable::Temperature, Frequency::Monthly, frames).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| aggregate_series(&xs, &inst.cov, &inst.w).unwrap())
    };
    let one = run(1);
    let many = run(4);
    for (a, b) in one.rows().iter().flatten().zip(many.rows().iter().flatten()) {
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }
}

#[test]
fn identical_frames_give_identical_rows() {
    let inst = instance(3);
    let frames = (1..=3).map(|y| inst.x.clone().with_timestamp(Timestamp::year(2000 + y))).collect();
    let xs = RasterSeries::new(inst.spec, Variable::Temperature, Frequency::Annual, frames).unwrap();
    let t = aggregate_series(&xs, &inst.cov, &inst.w).unwrap();
    for row in t.rows() {
        assert!(row.iter().all(|v| v.map(f64::to_bits) == row[0].map(f64::to_bits)));
    }
}
