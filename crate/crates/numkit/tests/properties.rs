use crosspath_numkit::{
    batchnorm_forward, dense_forward, Activation, BatchNormState, Container, LstmWeights, Mode, Tape, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

proptest! {
    #[test]
    fn activation_ranges(x in -30.0f64..30.0) {
        let s = Activation::Sigmoid.apply(x);
        prop_assert!(s > 0.0 && s < 1.0);
        let t = Activation::Tanh.apply(x / 3.0);
        prop_assert!(t > -1.0 && t < 1.0);
        prop_assert!(Activation::Relu.apply(x) >= 0.0);
    }

    #[test]
    fn batchnorm_train_moments(
        rows in 2usize..12,
        cols in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect();
        let x = Tensor::new(vec![rows, cols], data.clone()).unwrap();
        let mut st = BatchNormState::new(cols);
        let y = batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        for j in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| y.row(r)[j]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-6);
            let xin: Vec<f64> = (0..rows).map(|r| data[r * cols + j]).collect();
            let m = xin.iter().sum::<f64>() / rows as f64;
            let v = xin.iter().map(|a| (a - m).powi(2)).sum::<f64>() / rows as f64;
            let expected = v / (v + 1e-5);
            prop_assert!((var - expected).abs() < 1e-9, "var {} expected {}", var, expected);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = LstmWeights::init(3, 4, &mut rng);
            let mut t = Tape::new();
            let x = t.constant(Tensor::full(&[2, 3], 0.25)).unwrap();
            let wi = t.param("wi", &w.input).unwrap();
            let wr = t.param("wr", &w.recurrent).unwrap();
            let b = t.param("b", &w.bias).unwrap();
            let s = t.lstm_cell(x, None, wi, wr, b, None).unwrap();
            let s = t.lstm_cell(x, Some(s), wi, wr, b, None).unwrap();
            t.value(s).unwrap().clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn container_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), meta in "[a-z{}\":,]{0,30}") {
        let n = values.len();
        let c = Container::new(meta, BTreeMap::from([
            ("layer.w".to_string(), Tensor::new(vec![n], values).unwrap()),
            ("a".to_string(), Tensor::zeros(&[2, 3])),
        ]));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

#[test]
fn identity_dense_batch() {
    let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 5.0, 0.5]]).unwrap();
    let y = dense_forward(&x, &eye, &Tensor::zeros(&[3]), Activation::Linear).unwrap();
    assert_eq!(y, x);
}
