use monalab::checkpoint::{decode, encode, Entry};
use monalab::delta::mona::{count_mona, mona_forward, MonaOptions, MonaParams, MonaVariant};
use monalab::delta::MethodKind;
use monalab::harness::topk_accuracy;
use monalab::init::rng;
use monalab::nn::TokenGrid;
use monalab::params::ParamStore;
use monalab::{Origin, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |d| Tensor::from_vec(&shape, d).unwrap())
}

fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn count_formula_matches_construction(m in 1usize..48, n in 1usize..24) {
        let p = MonaParams::init(m, n, MonaVariant::V4Final, &mut rng(0)).unwrap();
        prop_assert_eq!(p.scalar_count() as u64, count_mona(m as u64, n as u64));
    }

    #[test]
    fn mona_keeps_shape_and_finiteness(
        b in 1usize..3, h in 1usize..5, w in 1usize..5, m in 1usize..6, n in 1usize..4,
        v in 0usize..4, seed in 0u64..1000,
    ) {
        let variant = MonaVariant::ALL[v];
        let mut store = ParamStore::new();
        MonaParams::init(m, n, variant, &mut rng(seed)).unwrap().register(&mut store, "p").unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = monalab::init::uniform_tensor(&[b, h, w, m], &mut rng(seed + 1)).unwrap();
        let xv = tape.constant(x);
        let g = TokenGrid::new(&tape, xv).unwrap();
        let y = mona_forward(&mut tape, &g, &store.resolver(&vars), "p", variant, &MonaOptions::default()).unwrap();
        prop_assert_eq!(tape.shape(y.var), &[b, h, w, m][..]);
        prop_assert!(tape.value(y.var).all_finite());
    }

    #[test]
    fn broadcast_add_grad_sums_over_repeats(shape in small_shape(), lead in 1usize..4) {
        let mut big = vec![lead];
        big.extend(&shape);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&big).unwrap(), true);
        let b = tape.leaf(Tensor::zeros(&shape).unwrap(), true);
        let y = tape.add(a, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.grad(b).unwrap().shape(), &shape[..]);
        prop_assert!(tape.grad(b).unwrap().data().iter().all(|&g| g == lead as f64));
        prop_assert!(tape.grad(a).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn softmax_rows_are_distributions(x in tensor(vec![3, 5])) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let p = tape.softmax(v).unwrap();
        for row in tape.value(p).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&q| q > 0.0));
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(x in tensor(vec![2, 3, 4])) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.permute(v, &[1, 2, 0]).unwrap();
        let back = tape.permute(p, &[2, 0, 1]).unwrap();
        prop_assert!(tape.value(back).bit_eq(&x));
    }

    #[test]
    fn checkpoint_codec_roundtrips(
        shapes in prop::collection::vec(small_shape(), 1..5),
        seed in 0u64..10_000,
    ) {
        let entries: Vec<Entry> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| Entry {
                name: format!("m{i}.w"),
                origin: Origin::from_code((i % 3) as u8).unwrap(),
                trainable: i % 2 == 0,
                tensor: monalab::init::uniform_tensor(s, &mut rng(seed + i as u64)).unwrap(),
            })
            .collect();
        let bytes = encode(&entries);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for (a, b) in back.iter().zip(&entries) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.origin, b.origin);
            prop_assert_eq!(a.trainable, b.trainable);
            prop_assert!(a.tensor.bit_eq(&b.tensor));
        }
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn accuracies_are_ordered_fractions(x in tensor(vec![6, 7]), labels in prop::collection::vec(0usize..7, 6)) {
        let acc = topk_accuracy(&x, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc.top1));
        prop_assert!(acc.top1 <= acc.top5 && acc.top5 <= 1.0);
        prop_assert_eq!((acc.top1 * 6.0).fract(), 0.0);
    }
}

#[test]
fn method_names_roundtrip() {
    for kind in MethodKind::ALL {
        assert_eq!(kind.name().parse::<MethodKind>().unwrap(), kind);
        let json = serde_json::to_string(&kind).unwrap();
        assert_eq!(json, format!("\"{}\"", kind.name()));
    }
}
