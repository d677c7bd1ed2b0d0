use chrono::NaiveDate;
use oilcast::data::{
    date_of, epoch_day, format_csv, generate_from_wells, generate_synthetic, load_csv, parse_csv, save_csv, truncate_at_all_breakthroughs,
    truncate_at_breakthrough, ChannelGroup, ColumnKey, Grouping, SeriesPanel, SyntheticFieldConfig, WellSpec,
};
use oilcast::{Error, Tensor};
use proptest::prelude::*;

fn panel(cols: &[(&str, &str)], rows: &[&[f64]]) -> SeriesPanel<f64> {
    let columns = cols.iter().map(|(s, c)| ColumnKey::new(*s, *c)).collect();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let ts = (0..rows.len() as i64).map(|i| 7305 + 2 * i).collect();
    SeriesPanel::new(columns, ts, Tensor::new(vec![rows.len(), cols.len()], data).unwrap()).unwrap()
}

fn single_column(values: &[f64]) -> SeriesPanel<f64> {
    let rows: Vec<&[f64]> = values.iter().map(std::slice::from_ref).collect();
    panel(&[("a", "water")], &rows)
}

fn quiet_config() -> SyntheticFieldConfig {
    SyntheticFieldConfig { n_sites: 1, wells_per_site: 1, steps: 60, noise: 0.0, shutin_rate: 0.0, ..SyntheticFieldConfig::default() }
}

#[test]
fn epoch_days_count_from_1970() {
    let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).unwrap();
    assert_eq!(epoch_day(d(1970, 1, 1)), 0);
    assert_eq!(epoch_day(d(1970, 1, 3)), 2);
    assert_eq!(epoch_day(d(1990, 1, 1)), 7305);
    assert_eq!(date_of(7305), d(1990, 1, 1));
}

#[test]
fn minimal_csv_loads() {
    let p = parse_csv::<f64>("date,site,channel,value\n2000-01-01,s,oil,1.5\n2000-01-03,s,oil,2\n").unwrap();
    assert_eq!((p.len(), p.dim()), (2, 1));
    assert_eq!(p.columns(), &[ColumnKey::new("s", "oil")]);
    assert_eq!(p.values().data(), &[1.5, 2.0]);
    assert_eq!(p.stride(), Some(2));
}

#[test]
fn unordered_dates_are_sorted_and_columns_keep_first_appearance() {
    let text = "date,site,channel,value\n\
                2000-01-05,b,oil,5\n2000-01-01,b,oil,1\n2000-01-03,a,oil,30\n\
                2000-01-03,b,oil,3\n2000-01-01,a,oil,10\n2000-01-05,a,oil,50\n";
    let p = parse_csv::<f64>(text).unwrap();
    assert_eq!(p.columns(), &[ColumnKey::new("b", "oil"), ColumnKey::new("a", "oil")]);
    assert_eq!(p.values().data(), &[1.0, 10.0, 3.0, 30.0, 5.0, 50.0]);
    let t0 = epoch_day(NaiveDate::from_ymd_opt(2000, 1, 1).unwrap());
    assert_eq!(p.timestamps(), &[t0, t0 + 2, t0 + 4]);
}

#[test]
fn duplicate_cells_are_rejected() {
    let text = "date,site,channel,value\n2000-01-01,s,oil,1\n2000-01-01,s,oil,2\n";
    assert!(matches!(parse_csv::<f64>(text), Err(Error::Format { line: 3, .. })));
}

#[test]
fn ragged_dates_report_their_line() {
    let text = "date,site,channel,value\n2000-01-01,s,oil,1\n2000-01-03,s,oil,1\n2000-01-06,s,oil,1\n";
    match parse_csv::<f64>(text) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn malformed_rows_are_format_errors() {
    for (text, want) in [
        ("date,site,channel,value\n2000-13-01,s,oil,1\n", 2),
        ("date,site,channel,value\n2000-01-01,s,oil,1\n2000-01-03,s,oil,abc\n", 3),
        ("day,site,channel,value\n2000-01-01,s,oil,1\n", 1),
    ] {
        match parse_csv::<f64>(text) {
            Err(Error::Format { line, .. }) => assert_eq!(line, want, "{text}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}

#[test]
fn negative_values_fail_validation() {
    let text = "date,site,channel,value\n2000-01-01,s,oil,1\n2000-01-03,s,oil,-0.5\n";
    assert!(matches!(parse_csv::<f64>(text), Err(Error::Validation(_))));
}

#[test]
fn missing_cells_are_errors_not_imputed() {
    let text = "date,site,channel,value\n2000-01-01,s,oil,1\n2000-01-01,s,water,0\n2000-01-03,s,oil,1\n";
    assert!(matches!(parse_csv::<f64>(text), Err(Error::Validation(_))));
}

#[test]
fn long_panel_splits_at_four_fifths() {
    let mut text = String::from("date,site,channel,value\n");
    let day0 = epoch_day(NaiveDate::from_ymd_opt(1970, 1, 1).unwrap());
    for t in 0..7200 {
        let date = date_of(day0 + 2 * t);
        for s in 1..=4 {
            text.push_str(&format!("{date},site{s},oil,{}.0\n", t % 7));
        }
    }
    let p = parse_csv::<f64>(&text).unwrap();
    assert_eq!((p.len(), p.dim(), p.split_index()), (7200, 4, 5760));
    let (train, test) = p.split(0.8).unwrap();
    assert_eq!((train.len(), test.len()), (5760, 1440));
}

#[test]
fn split_arithmetic_and_partition() {
    let values: Vec<f64> = (0..10).map(f64::from).collect();
    let p = single_column(&values);
    let (train, test) = p.split(0.8).unwrap();
    assert_eq!((train.len(), test.len()), (8, 2));
    let mut joined = train.column(0);
    joined.extend(test.column(0));
    assert_eq!(joined, values);
    assert!(std::ptr::eq(train.panel(), &p) && std::ptr::eq(test.panel(), &p));
    assert_eq!(train.timestamps().len() + test.timestamps().len(), 10);
    for bad in [0.0, 1.0, -0.1, 0.05] {
        assert!(matches!(p.split(bad), Err(Error::Parameter(_))), "{bad}");
    }
}

#[test]
fn panel_construction_validates() {
    let key = || vec![ColumnKey::new("a", "oil")];
    let t = |d: &[f64]| Tensor::<f64>::from_f64(&[d.len(), 1], d).unwrap();
    assert!(matches!(SeriesPanel::new(key(), vec![0, 2, 5], t(&[1.0, 1.0, 1.0])), Err(Error::Validation(_))));
    assert!(matches!(SeriesPanel::new(key(), vec![0, 2], t(&[1.0, -1.0])), Err(Error::Validation(_))));
    assert!(SeriesPanel::new(key(), vec![0, 2], t(&[1.0])).is_err());
    let two = vec![ColumnKey::new("a", "oil"), ColumnKey::new("a", "oil")];
    assert!(SeriesPanel::new(two, vec![0], Tensor::<f64>::zeros(&[1, 2])).is_err());
}

#[test]
fn truncation_examples() {
    let p = single_column(&[0.0, 0.0, 0.0, 1.0, 2.0]);
    let cut = truncate_at_breakthrough(&p, 0).unwrap();
    assert_eq!(cut.values().data(), &[1.0, 2.0]);
    assert_eq!(cut.timestamps(), &p.timestamps()[3..]);
    assert_eq!(cut.split_index(), 1);

    let p = single_column(&[0.5, 0.0, 2.0]);
    let same = truncate_at_breakthrough(&p, 0).unwrap();
    assert_eq!(same.values(), p.values());
    assert_eq!(same.timestamps(), p.timestamps());

    assert!(matches!(truncate_at_breakthrough(&single_column(&[0.0, 0.0]), 0), Err(Error::EmptyResult(_))));
}

#[test]
fn truncation_cuts_every_channel_identically() {
    let p = panel(&[("a", "oil"), ("a", "water"), ("b", "water")], &[&[9.0, 0.0, 0.0], &[8.0, 1.0, 0.0], &[7.0, 0.0, 3.0], &[6.0, 2.0, 4.0]]);
    let one = truncate_at_breakthrough(&p, 1).unwrap();
    assert_eq!(one.values().data(), &[8.0, 1.0, 0.0, 7.0, 0.0, 3.0, 6.0, 2.0, 4.0]);
    let both = truncate_at_all_breakthroughs(&p, &[1, 2]).unwrap();
    assert_eq!(both.values().data(), &[7.0, 0.0, 3.0, 6.0, 2.0, 4.0]);
    assert!(truncate_at_breakthrough(&p, 3).is_err());
}

proptest! {
    #[test]
    fn truncated_water_starts_positive(
        water in prop::collection::vec(prop_oneof![3 => Just(0.0), 1 => 0.0f64..5.0], 1..60),
    ) {
        let p = single_column(&water);
        match truncate_at_breakthrough(&p, 0) {
            Ok(cut) => {
                prop_assert!(cut.values().data()[0] > 0.0);
                let first = water.iter().position(|&w| w > 0.0).unwrap();
                prop_assert_eq!(cut.values().data(), &water[first..]);
                prop_assert_eq!(cut.split_index(), (cut.len() as f64 * 0.8).floor() as usize);
            }
            Err(e) => {
                prop_assert!(matches!(e, Error::EmptyResult(_)));
                prop_assert!(water.iter().all(|&w| w == 0.0));
            }
        }
    }

    #[test]
    fn split_views_partition_the_panel(len in 2usize..200, frac in 0.01f64..0.99) {
        let values: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let p = single_column(&values);
        let at = (len as f64 * frac).floor() as usize;
        match p.split(frac) {
            Ok((train, test)) => {
                prop_assert_eq!(train.range(), 0..at);
                prop_assert_eq!(test.range(), at..len);
                let mut joined = train.to_tensor().into_data();
                joined.extend(test.to_tensor().into_data());
                prop_assert_eq!(joined, values);
            }
            Err(_) => prop_assert!(at == 0 || at == len),
        }
    }
}

#[test]
fn arps_closed_forms() {
    let harmonic = WellSpec { qi: 80.0, di: 0.02, b: 1.0, start: 0, breakthrough: 0 };
    assert!((harmonic.arps(1.0 / 0.02) - 40.0).abs() < 1e-12);
    assert!((harmonic.arps(10.0) - 80.0 / 1.2).abs() < 1e-12);
    let exponential = WellSpec { b: 0.0, ..harmonic.clone() };
    assert!((exponential.arps(25.0) - 80.0 * (-0.5f64).exp()).abs() < 1e-12);
    let hyperbolic = WellSpec { b: 0.5, ..harmonic.clone() };
    assert!((hyperbolic.arps(10.0) - 80.0 / 1.1f64.powi(2)).abs() < 1e-12);
    // b → 0 approaches the exponential limit.
    let nearly = WellSpec { b: 1e-7, ..harmonic };
    assert!((nearly.arps(25.0) - exponential.arps(25.0)).abs() < 1e-4);
}

#[test]
fn well_specs_validate() {
    let ok = WellSpec { qi: 1.0, di: 0.0, b: 0.0, start: 3, breakthrough: 3 };
    assert!(ok.validate().is_ok());
    for bad in [
        WellSpec { qi: 0.0, ..ok.clone() },
        WellSpec { di: -1.0, ..ok.clone() },
        WellSpec { b: 1.5, ..ok.clone() },
        WellSpec { breakthrough: 2, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn flat_decline_without_noise_is_constant() {
    let cfg = quiet_config();
    let well = WellSpec { qi: 42.0, di: 0.0, b: 0.0, start: 7, breakthrough: 60 };
    let field = generate_from_wells::<f64>(&cfg, &[vec![well]]).unwrap();
    let oil = field.panel.column(0);
    assert!(oil[..7].iter().all(|&v| v == 0.0));
    assert!(oil[7..].iter().all(|&v| v == 42.0));
    assert!(field.panel.column(1).iter().all(|&v| v == 0.0));
}

#[test]
fn water_rises_as_oil_declines_proportionally() {
    let cfg = quiet_config();
    let well = WellSpec { qi: 10.0, di: 0.0, b: 0.0, start: 0, breakthrough: 20 };
    let field = generate_from_wells::<f64>(&cfg, &[vec![well]]).unwrap();
    let (oil, water) = (field.panel.column(0), field.panel.column(1));
    for t in 0..60 {
        assert!((oil[t] + water[t] - 10.0).abs() < 1e-12, "liquid conserved at {t}");
    }
    assert!(water[..21].iter().all(|&v| v == 0.0));
    assert!(water[21..].windows(2).all(|w| w[1] > w[0]));
    assert!(water[59] < cfg.water_cut_max * 10.0);
}

#[test]
fn shutins_zero_both_channels_then_surge() {
    let cfg = SyntheticFieldConfig { steps: 400, shutin_rate: 0.05, ..quiet_config() };
    let well = WellSpec { qi: 30.0, di: 0.004, b: 0.3, start: 5, breakthrough: 50 };
    let field = generate_from_wells::<f64>(&cfg, &[vec![well.clone()]]).unwrap();
    let (oil, water) = (field.panel.column(0), field.panel.column(1));
    let mut runs = 0;
    let mut t = well.start;
    while t < oil.len() {
        if oil[t] != 0.0 {
            t += 1;
            continue;
        }
        let begin = t;
        while t < oil.len() && oil[t] == 0.0 {
            assert_eq!(water[t], 0.0, "water must stop with oil at {t}");
            t += 1;
        }
        if t < oil.len() {
            runs += 1;
            assert!(t - begin >= cfg.shutin_min);
            let dt = (t - well.start) as f64;
            let cut = if t >= well.breakthrough {
                let x = (t - well.breakthrough) as f64 / cfg.water_cut_tau;
                cfg.water_cut_max * (2.0 / (1.0 + (-x).exp()) - 1.0)
            } else {
                0.0
            };
            let want = well.arps(dt) * (1.0 - cut) * (1.0 + cfg.surge_amp);
            assert!((oil[t] - want).abs() < 1e-9, "surge at reopening {t}: {} vs {want}", oil[t]);
        }
    }
    assert!(runs > 3, "expected several shut-ins, saw {runs}");
}

#[test]
fn default_field_properties() {
    let cfg = SyntheticFieldConfig::default();
    let field = generate_synthetic::<f64>(&cfg).unwrap();
    let p = &field.panel;
    assert_eq!((p.len(), p.dim(), p.stride()), (2000, 8, Some(2)));
    assert_eq!(p.sites(), vec!["site1", "site2", "site3", "site4"]);
    assert_eq!(p.timestamps()[0], epoch_day(cfg.start_date));
    assert!(p.values().data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    assert_eq!(field.wells.len(), 60);

    let specs = cfg.sample_wells().unwrap();
    for w in &field.wells {
        let spec = &specs[w.site][w.well];
        assert!(w.water[..spec.breakthrough.min(2000)].iter().all(|&v| v == 0.0));
        assert!(w.oil[..spec.start].iter().all(|&v| v == 0.0));
    }
    for s in 0..4 {
        for (col, pick) in [(2 * s, 0), (2 * s + 1, 1)] {
            let column = p.column(col);
            for (t, &v) in column.iter().enumerate() {
                let sum: f64 = field.wells.iter().filter(|w| w.site == s).map(|w| if pick == 0 { w.oil[t] } else { w.water[t] }).sum();
                assert!((v - sum).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn same_seed_same_field() {
    let cfg = SyntheticFieldConfig { steps: 300, ..SyntheticFieldConfig::default() };
    let a = generate_synthetic::<f64>(&cfg).unwrap().panel;
    let b = generate_synthetic::<f64>(&cfg).unwrap().panel;
    assert!(a.values().data().iter().zip(b.values().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let c = generate_synthetic::<f64>(&SyntheticFieldConfig { seed: 43, ..cfg }).unwrap().panel;
    assert_ne!(a.values(), c.values());
}

#[test]
fn generator_config_rejects_empty_sites() {
    let cfg = SyntheticFieldConfig { wells_per_site: 0, ..SyntheticFieldConfig::default() };
    assert!(matches!(generate_synthetic::<f64>(&cfg), Err(Error::Validation(_))));
    let cfg = SyntheticFieldConfig { b_max: 1.5, ..SyntheticFieldConfig::default() };
    assert!(cfg.validate().is_err());
}

#[test]
fn config_text_round_trips() {
    let cfg = SyntheticFieldConfig { seed: 7, noise: 0.125, di_max: 3.5e-3, steps: 321, ..SyntheticFieldConfig::default() };
    assert_eq!(SyntheticFieldConfig::parse(&cfg.to_text()).unwrap(), cfg);
    let parsed = SyntheticFieldConfig::parse("# field\nseed = 9  # trailing\n\nn_sites=2\n").unwrap();
    assert_eq!((parsed.seed, parsed.n_sites, parsed.steps), (9, 2, 2000));
    assert!(matches!(SyntheticFieldConfig::parse("seed 9\n"), Err(Error::Format { line: 1, .. })));
    assert!(matches!(SyntheticFieldConfig::parse("x = 1\nbogus = 2\n"), Err(Error::Format { line: 1, .. })));
    assert!(SyntheticFieldConfig::parse("wells_per_site = 0\n").is_err());
}

#[test]
fn csv_round_trip_is_exact() {
    let cfg = SyntheticFieldConfig { steps: 120, ..SyntheticFieldConfig::default() };
    let p = generate_synthetic::<f64>(&cfg).unwrap().panel;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("field.csv");
    save_csv(&p, &path).unwrap();
    let loaded = load_csv::<f64>(&path).unwrap();
    assert_eq!(loaded.columns(), p.columns());
    assert_eq!(loaded.timestamps(), p.timestamps());
    assert!(loaded.values().data().iter().zip(p.values().data()).all(|(a, b)| (a - b).abs() <= 5e-7));
    // The saved representation is a fixed point.
    assert_eq!(format_csv(&loaded), std::fs::read_to_string(&path).unwrap());
    let again = parse_csv::<f64>(&format_csv(&loaded)).unwrap();
    assert_eq!(again.values(), loaded.values());
    assert!(format_csv(&p).lines().nth(1).unwrap().starts_with("1990-01-01,site1,oil,"));
}

#[test]
fn groupings_pick_documented_columns() {
    let p = generate_synthetic::<f64>(&SyntheticFieldConfig { steps: 50, ..SyntheticFieldConfig::default() }).unwrap().panel;
    let all = Grouping::AllSitesOil.groups(&p).unwrap();
    assert_eq!(all, vec![ChannelGroup { name: "all".into(), columns: vec![0, 2, 4, 6], waters: vec![1, 3, 5, 7] }]);
    let per_site = Grouping::OilWaterPerSite.groups(&p).unwrap();
    assert_eq!(per_site.len(), 4);
    assert_eq!((per_site[2].name.as_str(), per_site[2].columns.clone()), ("site3", vec![4, 5]));
    let pairs = Grouping::OilOnlyPairs.groups(&p).unwrap();
    assert_eq!(pairs.iter().map(|g| g.columns.clone()).collect::<Vec<_>>(), vec![vec![0, 2], vec![4, 6]]);
    let three = p.select_columns(&[0, 1, 2, 3, 4, 5]).unwrap();
    let pairs = Grouping::OilOnlyPairs.groups(&three).unwrap();
    assert_eq!(pairs[1].columns, vec![4, 0]);
    for g in ["oil_only_pairs", "oil_water_per_site", "all_sites_oil"] {
        assert_eq!(g.parse::<Grouping>().unwrap().to_string(), g);
    }
    assert!("oil".parse::<Grouping>().is_err());
}

#[test]
fn group_extraction_truncates_at_the_latest_breakthrough() {
    let p = panel(
        &[("a", "oil"), ("a", "water"), ("b", "oil"), ("b", "water")],
        &[&[5.0, 0.0, 6.0, 0.0], &[4.0, 1.0, 5.0, 0.0], &[3.0, 1.0, 4.0, 2.0], &[2.0, 1.0, 3.0, 2.0]],
    );
    let g = &Grouping::AllSitesOil.groups(&p).unwrap()[0];
    let cut = g.extract(&p, true).unwrap();
    assert_eq!(cut.values().data(), &[3.0, 4.0, 2.0, 3.0]);
    assert_eq!(g.extract(&p, false).unwrap().len(), 4);
}
