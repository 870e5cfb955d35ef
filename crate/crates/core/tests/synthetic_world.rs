use zonalclim_core::fixtures::{self, synthetic_world, L0_REGIONS, L1_REGIONS, MONTHS};
use zonalclim_core::geom::Level;
use zonalclim_core::grid::EARTH_RADIUS_KM;
use zonalclim_core::weights::WeightKind;
use zonalclim_core::zonal::aggregate_series;

fn row_area(row: usize) -> f64 {
    let n = (6.0 - row as f64).to_radians();
    let s = (5.0 - row as f64).to_radians();
    EARTH_RADIUS_KM * EARTH_RADIUS_KM * 1f64.to_radians() * (n.sin() - s.sin())
}

fn weight(kind: WeightKind, row: usize, col: usize) -> f64 {
    match kind {
        WeightKind::Unweighted => 1.0,
        WeightKind::Population => fixtures::density(row, col) * row_area(row),
        WeightKind::Nightlight => {
            let mut s = 0.0;
            for fr in 2 * row..2 * row + 2 {
                for fc in 2 * col..2 * col + 2 {
                    s += fixtures::fine_radiance(fr, fc);
                }
            }
            s / 4.0
        }
    }
}

/// Share of cell (row, col) inside an axis-aligned box.
fn fraction(b: (f64, f64, f64, f64), row: usize, col: usize) -> f64 {
    let (w, s, e, n) = b;
    let (cw, ce) = (col as f64, col as f64 + 1.0);
    let (cs, cn) = (5.0 - row as f64, 6.0 - row as f64);
    let dx = (e.min(ce) - w.max(cw)).max(0.0);
    let dy = (n.min(cn) - s.max(cs)).max(0.0);
    dx * dy
}

/// Returns (value, mass) for one region and month.
fn oracle(b: (f64, f64, f64, f64), kind: WeightKind, t: usize) -> (Option<f64>, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for row in 0..6 {
        for col in 0..6 {
            let f = fraction(b, row, col);
            if f == 0.0 {
                continue;
            }
            if let Some(x) = fixtures::temperature(row, col, t) {
                let m = row_area(row) * f * weight(kind, row, col);
                num += m * x;
                den += m;
            }
        }
    }
    ((den > 0.0).then(|| num / den), den)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

#[test]
fn hand_oracle_for_every_weighting_and_level() {
    let world = synthetic_world();
    for level in [Level::L0, Level::L1] {
        let regions: &[(&str, Option<&str>, f64, f64, f64, f64)] = match level {
            Level::L0 => &L0_REGIONS,
            Level::L1 => &L1_REGIONS,
        };
        let cov = world.coverage(level);
        for kind in [WeightKind::Unweighted, WeightKind::Population, WeightKind::Nightlight] {
            let table = aggregate_series(&world.temperature, &cov, &world.weights(kind).unwrap()).unwrap();
            assert_eq!(table.timestamps().len(), MONTHS);
            for &(id, _, w, s, e, n) in regions {
                let r = table.region_index(id).unwrap();
                for t in 0..MONTHS {
                    let (want, _) = oracle((w, s, e, n), kind, t);
                    let got = table.row(r)[t];
                    assert!(close(got.unwrap(), want.unwrap()), "{level} {kind} {id} t={t}: {got:?} vs {want:?}");
                }
            }
        }
    }
}

#[test]
fn parent_is_mass_weighted_combination_of_children() {
    let world = synthetic_world();
    for kind in [WeightKind::Unweighted, WeightKind::Population, WeightKind::Nightlight] {
        let w = world.weights(kind).unwrap();
        let l0 = aggregate_series(&world.temperature, &world.coverage(Level::L0), &w).unwrap();
        let l1 = aggregate_series(&world.temperature, &world.coverage(Level::L1), &w).unwrap();
        for (parent, children) in [("A", vec!["A.1", "A.2"]), ("B", vec!["B.1"])] {
            for t in 0..MONTHS {
                let (mut num, mut den) = (0.0, 0.0);
                for child in &children {
                    let &(_, _, cw, cs, ce, cn) = L1_REGIONS.iter().find(|r| r.0 == *child).unwrap();
                    let (_, mass) = oracle((cw, cs, ce, cn), kind, t);
                    let y = l1.row(l1.region_index(child).unwrap())[t].unwrap();
                    num += mass * y;
                    den += mass;
                }
                let parent_y = l0.row(l0.region_index(parent).unwrap())[t].unwrap();
                assert!(close(parent_y, num / den), "{kind} {parent} t={t}");
            }
        }
    }
}

#[test]
fn geojson_fixture_matches_in_memory_regions() {
    let world = synthetic_world();
    for level in [Level::L0, Level::L1] {
        let parsed = fixtures::parsed_regions(level).unwrap();
        assert_eq!(parsed.len(), world.regions(level).len());
        let a = zonalclim_core::geom::build_coverage(&world.spec, &parsed);
        assert_eq!(a, world.coverage(level));
    }
}

#[test]
fn store_holds_every_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let store = zonalclim_core::catalog::Store::open(dir.path()).unwrap();
    let metas = synthetic_world().populate(&store).unwrap();
    assert_eq!(metas.len(), 30);
    let listed = store.list().unwrap();
    assert_eq!(listed.len(), 30);
    for m in &metas {
        m.key.validate().unwrap();
        let (_, back) = store.lookup(&m.key).unwrap();
        assert_eq!(&back, m);
    }
}
