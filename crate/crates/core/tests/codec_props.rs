use adaptgen::codec::{build_layout, decode, decode_values, encode};
use adaptgen::zoo::{LayerSchema, LoraCheckpoint, LoraLayer};
use ndarray::Array2;
use proptest::prelude::*;

fn schema_strategy() -> impl Strategy<Value = Vec<LayerSchema>> {
    prop::collection::vec((1usize..4, 1usize..9, 1usize..9), 1..5).prop_map(|dims| {
        dims.into_iter()
            .enumerate()
            .map(|(i, (r, k, d))| LayerSchema {
                name: format!("l{i}"),
                a_shape: [r, k],
                b_shape: [d, r],
            })
            .collect()
    })
}

fn checkpoint(schema: &[LayerSchema], values: &[f32]) -> LoraCheckpoint {
    let mut it = values.iter().copied().cycle();
    let layers = schema
        .iter()
        .map(|s| LoraLayer {
            name: s.name.clone(),
            a: Array2::from_shape_simple_fn((s.a_shape[0], s.a_shape[1]), || it.next().unwrap()),
            b: Array2::from_shape_simple_fn((s.b_shape[0], s.b_shape[1]), || it.next().unwrap()),
        })
        .collect();
    LoraCheckpoint {
        task_id: String::new(),
        step_id: 0,
        rank: schema[0].a_shape[0],
        layers,
    }
}

fn bits(c: &LoraCheckpoint) -> Vec<u32> {
    c.flatten().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn layout_counts(schema in schema_strategy(), c in 1usize..20, l in 1usize..6) {
        let layout = build_layout(&schema, c, l).unwrap();
        for (i, s) in schema.iter().enumerate() {
            prop_assert_eq!(layout.tokens_per_layer[i], s.flat_len().div_ceil(c));
            prop_assert!(layout.pad_counts[i] < c);
            prop_assert_eq!(layout.tokens_per_layer[i] * c - s.flat_len(), layout.pad_counts[i]);
        }
        prop_assert_eq!(layout.grid, (layout.total_tokens().div_ceil(l), l, c));
        prop_assert_eq!(build_layout(&schema, c, l).unwrap(), layout);
    }

    #[test]
    fn round_trip_and_pad_zero(
        schema in schema_strategy(),
        c in 1usize..20,
        l in 1usize..6,
        values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64),
    ) {
        let layout = build_layout(&schema, c, l).unwrap();
        let ck = checkpoint(&schema, &values);
        let grid = encode(&ck, &layout).unwrap();
        for (v, pad) in grid.values.iter().zip(layout.pad_mask()) {
            prop_assert!(v.is_finite());
            if pad {
                prop_assert_eq!(v.to_bits(), 0.0f64.to_bits());
            }
        }
        prop_assert_eq!(bits(&decode(&grid).unwrap()), bits(&ck));
    }

    #[test]
    fn encode_is_linear(schema in schema_strategy(), values in prop::collection::vec(-1e3f32..1e3, 1..32), a in -8.0f32..8.0) {
        let layout = build_layout(&schema, 5, 3).unwrap();
        let ck = checkpoint(&schema, &values);
        let scaled = checkpoint(&schema, &values.iter().map(|v| a * v).collect::<Vec<_>>());
        let g = encode(&ck, &layout).unwrap();
        let gs = encode(&scaled, &layout).unwrap();
        for ((x, y), pad) in g.values.iter().zip(gs.values.iter()).zip(layout.pad_mask()) {
            if !pad {
                // both sides are the same f32 product widened to f64
                prop_assert_eq!(*y, f64::from(a * (*x as f32)));
            }
        }
    }

    #[test]
    fn order_stability(schema in schema_strategy(), values in prop::collection::vec(-1.0f32..1.0, 1..64), shift in 0usize..4) {
        let ck = checkpoint(&schema, &values);
        let mut rotated_schema = schema.clone();
        rotated_schema.rotate_left(shift % schema.len());
        let mut rotated = ck.clone();
        rotated.layers.rotate_left(shift % schema.len());
        let layout = build_layout(&rotated_schema, 3, 2).unwrap();
        let back = decode(&encode(&rotated, &layout).unwrap()).unwrap();
        for layer in &ck.layers {
            let got = back.layers.iter().find(|l| l.name == layer.name).unwrap();
            prop_assert_eq!(got, layer);
        }
    }
}

#[test]
fn zero_checkpoint_gives_zero_grid() {
    let schema = vec![LayerSchema { name: "x".into(), a_shape: [2, 5], b_shape: [3, 2] }];
    let layout = build_layout(&schema, 4, 2).unwrap();
    let grid = encode(&checkpoint(&schema, &[0.0]), &layout).unwrap();
    assert!(grid.values.iter().all(|v| *v == 0.0));
}

#[test]
fn mismatches_are_structural_errors() {
    let schema = vec![LayerSchema { name: "x".into(), a_shape: [2, 5], b_shape: [3, 2] }];
    let other = vec![LayerSchema { name: "x".into(), a_shape: [2, 4], b_shape: [3, 2] }];
    let layout = build_layout(&schema, 4, 2).unwrap();
    let err = encode(&checkpoint(&other, &[1.0]), &layout).unwrap_err();
    assert!(matches!(err, adaptgen::Error::Structural(_)), "{err}");
    let wrong = ndarray::Array3::zeros((1, 1, 1));
    assert!(matches!(decode_values(wrong.view(), &layout), Err(adaptgen::Error::Structural(_))));
}
