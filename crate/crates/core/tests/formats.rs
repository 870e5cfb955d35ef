use proptest::prelude::*;

use zonalclim_core::catalog::{export, import, Format, Shape};
use zonalclim_core::geom::Level;
use zonalclim_core::grid::{
    archive_to_bytes, parse_grid_archive, read_archive, ArchiveOptions, Encoding, Frequency, GridSpec, Raster,
    RasterSeries, Registration, Timestamp, Variable,
};
use zonalclim_core::weights::{WeightGrid, WeightKind};
use zonalclim_core::zonal::{SeriesHeader, SeriesTable};
use zonalclim_core::Error;

fn cell() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -1e6f64..1e6,
        1 => Just(f64::NAN),
        1 => prop::num::f64::NORMAL,
        1 => Just(-0.0),
    ]
}

fn series() -> impl Strategy<Value = RasterSeries> {
    (1usize..5, 1usize..6, 1usize..4, prop::bool::ANY).prop_flat_map(|(rows, cols, frames, center)| {
        prop::collection::vec(prop::collection::vec(cell(), rows * cols), frames).prop_map(move |planes| {
            let reg = if center { Registration::Center } else { Registration::Corner };
            let spec = GridSpec::new(rows, cols, -20.5, 10.25, 0.5, reg).unwrap();
            let frames = planes
                .into_iter()
                .enumerate()
                .map(|(t, v)| Raster::new(spec, v, Variable::Precipitation, Timestamp::month(1999, t as u32 + 1).unwrap()).unwrap())
                .collect();
            RasterSeries::new(spec, Variable::Precipitation, Frequency::Monthly, frames).unwrap()
        })
    })
}

fn table() -> impl Strategy<Value = SeriesTable> {
    (1usize..5, 1usize..8).prop_flat_map(|(regions, times)| {
        prop::collection::vec(
            prop::collection::vec(prop::option::weighted(0.8, prop::num::f64::NORMAL | prop::num::f64::ZERO), times),
            regions,
        )
        .prop_map(move |values| {
            let h = SeriesHeader::new(Level::L1, Variable::Temperature, WeightKind::Nightlight, Some(2005), Frequency::Annual);
            let ids = (0..regions).map(|i| format!("R-{i},\"q\"")).collect();
            let ts = (0..times).map(|t| Timestamp::year(1980 + t as i32)).collect();
            SeriesTable::new(h, ids, ts, values).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn archives_round_trip(s in series(), binary in any::<bool>()) {
        let opts = if binary { ArchiveOptions::binary() } else { ArchiveOptions::text() };
        let bytes = archive_to_bytes(&s, &opts).unwrap();
        let back = parse_grid_archive(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(archive_to_bytes(&back, &opts).unwrap(), bytes);
    }

    #[test]
    fn truncated_binary_is_reported(s in series(), cut in 1usize..64) {
        let bytes = archive_to_bytes(&s, &ArchiveOptions::binary()).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        let header_end = bytes.windows(10).position(|w| w == b"timestamp=").unwrap();
        prop_assume!(keep > header_end);
        prop_assert!(parse_grid_archive(&bytes[..keep]).is_err());
    }

    #[test]
    fn text_missing_rows_is_reported(s in series(), drop in 1usize..4) {
        let bytes = archive_to_bytes(&s, &ArchiveOptions::text()).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let keep = lines.len().saturating_sub(drop);
        prop_assume!(!lines[keep - 1].starts_with("frames="));
        let cut = lines[..keep].join("\n") + "\n";
        let err = parse_grid_archive(cut.as_bytes()).unwrap_err();
        prop_assert!(err.to_string().contains("shape mismatch") || lines[keep..].iter().any(|l| l.starts_with("timestamp=")), "{}", err);
    }

    #[test]
    fn exports_round_trip(t in table()) {
        for shape in [Shape::Wide, Shape::Long] {
            for format in [Format::Csv, Format::Json] {
                let bytes = export(&t, shape, format);
                let back = import(&bytes, shape, format, t.header().clone()).unwrap();
                prop_assert_eq!(&back, &t);
                prop_assert_eq!(export(&back, shape, format), bytes);
            }
        }
    }

    #[test]
    fn wide_and_long_agree(t in table()) {
        let long = import(&export(&t, Shape::Long, Format::Csv), Shape::Long, Format::Csv, t.header().clone()).unwrap();
        let wide = import(&export(&long, Shape::Wide, Format::Json), Shape::Wide, Format::Json, t.header().clone()).unwrap();
        prop_assert_eq!(wide, t);
    }

    #[test]
    fn weight_archives_round_trip(v in prop::collection::vec(0.0f64..1e9, 12), year in prop::sample::select(vec![2000, 2005, 2010, 2015])) {
        let spec = GridSpec::new(3, 4, 100.0, -10.0, 0.25, Registration::Corner).unwrap();
        let w = WeightGrid::new(spec, v, WeightKind::Population, Some(year)).unwrap();
        for enc in [Encoding::Text, Encoding::LeFloat64] {
            let mut buf = Vec::new();
            w.write_archive(&mut buf, enc).unwrap();
            prop_assert_eq!(WeightGrid::read_archive(buf.as_slice()).unwrap(), w.clone());
        }
    }
}

#[test]
fn sentinel_masks_on_read() {
    let text = "rows=1\ncols=3\nlon_west=0\nlat_north=1\ncell_size=1\nregistration=corner\nvariable=temperature\n\
                frequency=annual\nsentinel=-9999\nframes=1\nencoding=text\ntimestamp=2000\n1.5 -9999 2\n";
    let (header, s) = read_archive(text.as_bytes()).unwrap();
    assert_eq!(header.sentinel, Some(-9999.0));
    assert_eq!(s.frames()[0].get(0, 1), None);
    assert_eq!(s.frames()[0].get(0, 2), Some(2.0));
    let again = archive_to_bytes(&s, &ArchiveOptions::text().with_sentinel(-9999.0)).unwrap();
    assert_eq!(String::from_utf8(again).unwrap(), text);
}

#[test]
fn truncated_text_names_the_shape_problem() {
    let text = "rows=2\ncols=2\nlon_west=0\nlat_north=2\ncell_size=1\nregistration=corner\nvariable=temperature\n\
                frequency=annual\nsentinel=none\nframes=1\nencoding=text\ntimestamp=2000\n1 2\n3\n";
    let err = parse_grid_archive(text.as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
    assert!(err.to_string().contains("shape mismatch"), "{err}");
}
