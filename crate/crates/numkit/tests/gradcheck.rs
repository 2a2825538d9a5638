//! Analytic gradients vs. central finite differences (step 1e-5).

use crosspath_numkit::{
    dropout_mask, lstm_cell_forward, Activation, LstmWeights, ParamMap, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Central-difference oracle over every entry of every parameter.
fn check<F>(params: &ParamMap, loss: F)
where
    F: Fn(&mut Tape, &ParamMap) -> Var,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, params);
    let analytic = tape.backward(l).unwrap().into_params();

    let eval = |p: &ParamMap| {
        let mut t = Tape::new();
        let l = loss(&mut t, p);
        t.value(l).unwrap().item().unwrap()
    };
    for (name, tensor) in params {
        let g = &analytic[name];
        assert_eq!(g.shape(), tensor.shape(), "gradient shape for {name}");
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < TOL,
                "{name}[{i}]: analytic {a:e}, numeric {numeric:e}, rel {rel:e}"
            );
        }
    }
}

fn p(t: &mut Tape, params: &ParamMap, name: &str) -> Var {
    t.param(name, &params[name]).unwrap()
}

#[test]
fn lstm_cell_four_units() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LstmWeights::init(3, 4, &mut rng);
        let params = ParamMap::from([
            ("w_in".into(), w.input),
            ("w_rec".into(), w.recurrent),
            ("b".into(), w.bias),
            ("x".into(), rand_tensor(&mut rng, &[2, 3], 1.0)),
            ("s0".into(), rand_tensor(&mut rng, &[2, 8], 0.8)),
            ("proj".into(), rand_tensor(&mut rng, &[2, 8], 1.0)),
        ]);
        check(&params, |t, ps| {
            let x = p(t, ps, "x");
            let s0 = p(t, ps, "s0");
            let (wi, wr, b) = (p(t, ps, "w_in"), p(t, ps, "w_rec"), p(t, ps, "b"));
            let s1 = t.lstm_cell(x, Some(s0), wi, wr, b, None).unwrap();
            // weighted sum touches both h and c halves of the packed state
            let proj = p(t, ps, "proj");
            let k = t.value(proj).unwrap().clone();
            let tgt = Tensor::zeros(k.shape());
            let diff = t.add(s1, proj).unwrap();
            t.masked_mse(diff, &tgt, &vec![1.0; k.len()]).unwrap()
        });
    }
}

#[test]
fn dense_mse_three_samples() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = ParamMap::from([
            ("w".into(), rand_tensor(&mut rng, &[2, 4], 1.0)),
            ("b".into(), rand_tensor(&mut rng, &[2], 0.5)),
        ]);
        let x = rand_tensor(&mut rng, &[3, 4], 2.0);
        let target = rand_tensor(&mut rng, &[3, 2], 1.0);
        for act in [Activation::Linear, Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
            check(&params, |t, ps| {
                let xv = t.constant(x.clone()).unwrap();
                let (w, b) = (p(t, ps, "w"), p(t, ps, "b"));
                let z = t.linear(xv, w, b).unwrap();
                let y = t.activation(z, act).unwrap();
                t.masked_mse(y, &target, &[1.0; 6]).unwrap()
            });
        }
    }
}

#[test]
fn dense_lstm_dense_through_time() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let lw = LstmWeights::init(3, 4, &mut rng);
        let params = ParamMap::from([
            ("enc_w".into(), rand_tensor(&mut rng, &[3, 2], 1.0)),
            ("enc_b".into(), rand_tensor(&mut rng, &[3], 0.3)),
            ("w_in".into(), lw.input),
            ("w_rec".into(), lw.recurrent),
            ("b".into(), lw.bias),
            ("out_w".into(), rand_tensor(&mut rng, &[2, 4], 1.0)),
            ("out_b".into(), rand_tensor(&mut rng, &[2], 0.3)),
        ]);
        let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[2, 2], 1.5)).collect();
        let target = rand_tensor(&mut rng, &[2, 2], 1.0);
        // second row only sees the last two steps
        let masks = [vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]];
        check(&params, |t, ps| {
            let (ew, eb) = (p(t, ps, "enc_w"), p(t, ps, "enc_b"));
            let (wi, wr, b) = (p(t, ps, "w_in"), p(t, ps, "w_rec"), p(t, ps, "b"));
            let mut state = None;
            for (x, m) in xs.iter().zip(&masks) {
                let xv = t.constant(x.clone()).unwrap();
                let e = t.linear(xv, ew, eb).unwrap();
                let e = t.activation(e, Activation::Tanh).unwrap();
                state = Some(t.lstm_cell(e, state, wi, wr, b, Some(m)).unwrap());
            }
            let h = t.slice_cols(state.unwrap(), 0, 4).unwrap();
            let (ow, ob) = (p(t, ps, "out_w"), p(t, ps, "out_b"));
            let y = t.linear(h, ow, ob).unwrap();
            let y = t.activation(y, Activation::Sigmoid).unwrap();
            t.masked_mse(y, &target, &[1.0, 0.0, 1.0, 1.0]).unwrap()
        });
    }
}

#[test]
fn batchnorm_concat_dropout() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let params = ParamMap::from([
            ("a".into(), rand_tensor(&mut rng, &[4, 2], 2.0)),
            ("b".into(), rand_tensor(&mut rng, &[4, 1], 2.0)),
            ("gamma".into(), rand_tensor(&mut rng, &[3], 1.5)),
            ("beta".into(), rand_tensor(&mut rng, &[3], 0.5)),
        ]);
        let mask = dropout_mask(12, 0.3, &mut rng);
        let target = rand_tensor(&mut rng, &[4, 3], 1.0);
        let rm: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rv: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
        for train in [true, false] {
            check(&params, |t, ps| {
                let (a, b) = (p(t, ps, "a"), p(t, ps, "b"));
                let x = t.concat_cols(a, b).unwrap();
                let (g, be) = (p(t, ps, "gamma"), p(t, ps, "beta"));
                let y = if train {
                    t.batchnorm_train(x, g, be).unwrap().0
                } else {
                    t.batchnorm_infer(x, g, be, &rm, &rv).unwrap()
                };
                let y = t.dropout(y, mask.clone()).unwrap();
                let y = t.scale(y, 0.7).unwrap();
                t.masked_mse(y, &target, &[1.0; 12]).unwrap()
            });
        }
    }
}

#[test]
fn sum_mean_add() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let params = ParamMap::from([
            ("u".into(), rand_tensor(&mut rng, &[5], 1.0)),
            ("v".into(), rand_tensor(&mut rng, &[5], 1.0)),
        ]);
        check(&params, |t, ps| {
            let (u, v) = (p(t, ps, "u"), p(t, ps, "v"));
            let s = t.add(u, v).unwrap();
            let s = t.activation(s, Activation::Tanh).unwrap();
            let m = t.mean(s).unwrap();
            let su = t.sum(u).unwrap();
            let su = t.activation(su, Activation::Sigmoid).unwrap();
            t.add(m, su).unwrap()
        });
    }
}

#[test]
fn length_one_sequence_matches_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = LstmWeights::init(4, 5, &mut rng);
    let x = rand_tensor(&mut rng, &[3, 4], 1.0);
    let (h, c) = lstm_cell_forward(&x, &Tensor::zeros(&[3, 5]), &Tensor::zeros(&[3, 5]), &w).unwrap();

    let mut t = Tape::new();
    let xv = t.constant(x).unwrap();
    let wi = t.param("wi", &w.input).unwrap();
    let wr = t.param("wr", &w.recurrent).unwrap();
    let b = t.param("b", &w.bias).unwrap();
    let s = t.lstm_cell(xv, None, wi, wr, b, None).unwrap();
    let packed = t.value(s).unwrap();
    for r in 0..3 {
        assert_eq!(&packed.row(r)[..5], h.row(r));
        assert_eq!(&packed.row(r)[5..], c.row(r));
    }
}

#[test]
fn masked_rows_carry_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = LstmWeights::init(2, 3, &mut rng);
    let mut t = Tape::new();
    let wi = t.param("wi", &w.input).unwrap();
    let wr = t.param("wr", &w.recurrent).unwrap();
    let b = t.param("b", &w.bias).unwrap();
    let x0 = t.constant(rand_tensor(&mut rng, &[2, 2], 1.0)).unwrap();
    let s0 = t.lstm_cell(x0, None, wi, wr, b, None).unwrap();
    let x1 = t.constant(rand_tensor(&mut rng, &[2, 2], 1.0)).unwrap();
    let s1 = t.lstm_cell(x1, Some(s0), wi, wr, b, Some(&[0.0, 1.0])).unwrap();
    let before = t.value(s0).unwrap().clone();
    let after = t.value(s1).unwrap();
    assert_eq!(before.row(0), after.row(0));
    assert_ne!(before.row(1), after.row(1));
}
