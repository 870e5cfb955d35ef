use proptest::prelude::*;

use zonalclim_core::grid::{GridSpec, Raster, Registration, Timestamp, Variable};
use zonalclim_core::weights::{aurora_correct, downsample_block_mean, resample_half_offset, WeightGrid, WeightKind};

fn raster(spec: GridSpec, values: Vec<f64>) -> Raster {
    Raster::new(spec, values, Variable::Nightlight, Timestamp::year(2015)).unwrap()
}

fn cells(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_mean_of_constant(c in 0.0f64..1e4, factor in 1usize..5, br in 1usize..4, bc in 1usize..4) {
        let spec = GridSpec::new(br * factor, bc * factor, 0.0, 50.0, 0.1, Registration::Corner).unwrap();
        let out = downsample_block_mean(&Raster::filled(spec, c, Variable::Nightlight, Timestamp::year(2015)), factor).unwrap();
        prop_assert_eq!(out.spec().n_rows(), br);
        for v in out.values() {
            prop_assert!((v - c).abs() <= 1e-12 * c.max(1.0));
        }
    }

    #[test]
    fn block_mean_matches_direct_mean(vals in cells(6, 6, 0.0, 100.0)) {
        let spec = GridSpec::new(6, 6, 0.0, 50.0, 0.5, Registration::Corner).unwrap();
        let out = downsample_block_mean(&raster(spec, vals.clone()), 3).unwrap();
        for (br, bc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut s = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    s += vals[(br * 3 + r) * 6 + bc * 3 + c];
                }
            }
            let got = out.get(br, bc).unwrap();
            prop_assert!((got - s / 9.0).abs() <= 1e-12 * got.max(1.0));
        }
    }

    #[test]
    fn aurora_modifies_exactly_the_characterized_set(
        target in cells(8, 4, 0.5, 10.0),
        zeros in prop::collection::vec(prop::collection::vec(any::<bool>(), 32), 3),
        cut in 30.0f64..80.0,
    ) {
        let spec = GridSpec::new(8, 4, 0.0, 90.0, 10.0, Registration::Corner).unwrap();
        let t = raster(spec, target.clone());
        let refs: Vec<Raster> = zeros
            .iter()
            .map(|z| raster(spec, z.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect()))
            .collect();
        let out = aurora_correct(&t, &refs, cut).unwrap();
        for row in 0..8 {
            let center = 90.0 - 10.0 * (row as f64 + 0.5);
            for col in 0..4 {
                let i = row * 4 + col;
                let hit = center.abs() > cut && zeros.iter().all(|z| z[i]);
                let want = if hit { 0.0 } else { target[i] };
                prop_assert_eq!(out.values()[i], want);
            }
        }
        let again = aurora_correct(&out, &refs, cut).unwrap();
        prop_assert_eq!(again.values(), out.values());
    }

    #[test]
    fn half_offset_is_linear(a in cells(4, 8, 0.0, 50.0), b in cells(4, 8, 0.0, 50.0), alpha in 0.0f64..5.0, beta in 0.0f64..5.0) {
        let src = GridSpec::new(4, 8, -180.0, 90.0, 45.0, Registration::Corner).unwrap();
        let dst = GridSpec::new(5, 8, -180.0, 90.0, 45.0, Registration::Center).unwrap();
        let wg = |v: Vec<f64>| WeightGrid::new(src, v, WeightKind::Nightlight, Some(2015)).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let ra = resample_half_offset(&wg(a), &dst).unwrap();
        let rb = resample_half_offset(&wg(b), &dst).unwrap();
        let rc = resample_half_offset(&wg(combo), &dst).unwrap();
        for i in 0..dst.n_cells() {
            let want = alpha * ra.values()[i] + beta * rb.values()[i];
            prop_assert!((rc.values()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn half_offset_preserves_constants(c in 0.0f64..1e6) {
        let src = GridSpec::new(6, 12, -180.0, 90.0, 30.0, Registration::Corner).unwrap();
        let dst = GridSpec::new(7, 12, -180.0, 90.0, 30.0, Registration::Center).unwrap();
        let w = WeightGrid::new(src, vec![c; 72], WeightKind::Population, Some(2000)).unwrap();
        let out = resample_half_offset(&w, &dst).unwrap();
        for v in out.values() {
            prop_assert!((v - c).abs() <= 1e-12 * c.max(1.0));
        }
    }
}
