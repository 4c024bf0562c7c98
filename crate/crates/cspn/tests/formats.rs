use cspn::model_io::{self, from_json, to_json};
use cspn::tabular;
use cspn_core::data::{Column, ColumnType, Dataset, Role, Schema};
use cspn_core::random_circuit::{random_circuit, RandomCircuitParams};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_circuits_round_trip_exactly(seed in any::<u64>(), ny in 1usize..5, nx in 0usize..3) {
        let c = random_circuit(&RandomCircuitParams::mixed(ny, nx), seed);
        let text = to_json(&c);
        let back = from_json(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(to_json(&back), text);
    }

    #[test]
    fn csv_round_trips_bit_exactly(
        rows in prop::collection::vec((any::<bool>(), 0u32..50, -1e12f64..1e12, 0usize..4), 1..40)
    ) {
        let schema = Schema::new(vec![
            Column::new("flag", ColumnType::Binary, Role::Y),
            Column::new("hits", ColumnType::Count, Role::Y),
            Column::new("level", ColumnType::Continuous, Role::X),
            Column::new("kind", ColumnType::Categorical(4), Role::X),
        ]);
        let values: Vec<f64> = rows.iter().flat_map(|&(b, c, x, k)| [f64::from(u8::from(b)), f64::from(c), x, k as f64]).collect();
        let data = Dataset::new(schema.clone(), &values).unwrap();
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("d.csv");
        tabular::save_csv(&data, &path).unwrap();
        let back = tabular::load_csv_with(&path, schema).unwrap();
        let back_values: Vec<u64> = (0..back.n_rows()).flat_map(|r| back.row(r)).map(f64::to_bits).collect();
        prop_assert_eq!(back_values, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn unknown_leaf_family_is_named() {
    let text = r#"{"format_version":1,"num_y":1,"num_x":0,"root":0,"nodes":[
{"id":0,"kind":"leaf","scope":[0],"leaf":{"family":"weibull","link":"log","coeffs":[0.0]}}]}"#;
    let e = from_json(text).unwrap_err();
    assert!(e.message.contains("\"weibull\""), "{e}");
    assert_eq!(e.node, Some(0));
}

#[test]
fn saved_files_reload_through_paths() {
    let c = random_circuit(&RandomCircuitParams::mixed(3, 2), 11);
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("m.json");
    model_io::save_model(&c, &p).unwrap();
    assert_eq!(model_io::load_model(&p).unwrap(), c);
    assert!(matches!(model_io::load_model(&d.path().join("none.json")), Err(model_io::ModelIoError::Io { .. })));
}
