use super::*;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    use rand::Rng as _;
    let mut rng = crate::rng::stream(seed, 99);
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Naive per-element evaluation, written independently of `Tensor2::matmul`.
fn naive_forward(model: &FcnnModel, input: &Tensor2) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = input.iter_rows().map(<[f64]>::to_vec).collect();
    for layer in model.layers() {
        rows = rows
            .iter()
            .map(|x| {
                let z: Vec<f64> = (0..layer.out_dim())
                    .map(|j| {
                        let mut acc = layer.bias[j];
                        for (k, xk) in x.iter().enumerate() {
                            acc += xk * layer.weight.get(k, j);
                        }
                        acc
                    })
                    .collect();
                match layer.activation {
                    Activation::Relu => z.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect(),
                    Activation::Identity => z,
                    Activation::Softmax => {
                        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.into_iter().map(|v| v / s).collect()
                    }
                }
            })
            .collect();
    }
    rows
}

#[test]
fn identity_relu_layer_passes_nonnegative_input_through() {
    let mut w = Tensor2::zeros(3, 3);
    for i in 0..3 {
        w.set(i, i, 1.0);
    }
    let model = FcnnModel::new(vec![Layer::new(w, vec![0.0; 3], Activation::Relu).unwrap()]).unwrap();
    let x = Tensor2::from_vec(2, 3, vec![0.0, 1.5, 2.0, 3.0, 0.25, 7.0]).unwrap();
    assert_eq!(model.forward(&x).unwrap(), x);
}

#[test]
fn zero_weights_yield_bias_rows() {
    let b = vec![0.5, -1.0];
    let model =
        FcnnModel::new(vec![Layer::new(Tensor2::zeros(3, 2), b.clone(), Activation::Identity).unwrap()])
            .unwrap();
    let out = model.forward(&tensor(4, 3, 1)).unwrap();
    for row in out.iter_rows() {
        assert_eq!(row, &b[..]);
    }
}

#[test]
fn forward_matches_naive_oracle() {
    let model = init_model(&[5, 7, 3], 11).unwrap();
    let x = tensor(6, 5, 12);
    let out = model.forward(&x).unwrap();
    let oracle = naive_forward(&model, &x);
    for (r, row) in oracle.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((out.get(r, c) - v).abs() <= 1e-12);
        }
    }
    // Pure function: bit-identical on repeat.
    assert_eq!(model.forward(&x).unwrap(), out);
}

#[test]
fn forward_rejects_wrong_width() {
    let model = init_model(&[4, 2], 1).unwrap();
    assert!(matches!(model.forward(&Tensor2::zeros(1, 3)), Err(NnError::Shape { .. })));
}

#[test]
fn linear_backward_is_transpose() {
    let w = tensor(3, 2, 5);
    let model =
        FcnnModel::new(vec![Layer::new(w.clone(), vec![0.0; 2], Activation::Identity).unwrap()]).unwrap();
    let x = tensor(1, 3, 6);
    let (_, cache) = model.forward_cached(&x).unwrap();
    let up = Tensor2::from_vec(1, 2, vec![0.3, -0.7]).unwrap();
    let (_, gin) = model.backward(&cache, &up).unwrap();
    for k in 0..3 {
        let expect = w.get(k, 0) * 0.3 + w.get(k, 1) * -0.7;
        assert!((gin.get(0, k) - expect).abs() < 1e-15);
    }
}

#[test]
fn relu_blocks_gradient_at_negative_preactivation() {
    let w = Tensor2::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
    let model = FcnnModel::new(vec![Layer::new(w, vec![0.0; 2], Activation::Relu).unwrap()]).unwrap();
    let x = Tensor2::from_vec(1, 1, vec![2.0]).unwrap();
    let (_, cache) = model.forward_cached(&x).unwrap();
    let (g, _) = model
        .backward(&cache, &Tensor2::from_vec(1, 2, vec![1.0, 1.0]).unwrap())
        .unwrap();
    assert_eq!(g.layers[0].weight.get(0, 0), 2.0);
    assert_eq!(g.layers[0].weight.get(0, 1), 0.0);
    assert_eq!(g.layers[0].bias[1], 0.0);
}

#[test]
fn backward_without_cache_is_state_error() {
    let model = init_model(&[2, 3, 1], 1).unwrap();
    let err = model
        .backward(&ForwardCache::default(), &Tensor2::zeros(1, 1))
        .unwrap_err();
    assert!(matches!(err, NnError::MissingCache(_)));
}

/// Central finite differences of `L = Σ upstream ⊙ forward(x)`.
pub(crate) fn fd_check(model: &FcnnModel, x: &Tensor2, upstream: &Tensor2) -> f64 {
    let h = 1e-5;
    let objective = |m: &FcnnModel, x: &Tensor2| -> f64 {
        let y = m.forward(x).unwrap();
        y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = model.forward_cached(x).unwrap();
    let (grads, gin) = model.backward(&cache, upstream).unwrap();
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    };
    for (li, layer) in model.layers().iter().enumerate() {
        for idx in 0..layer.weight.data().len() {
            let mut plus = model.clone();
            plus.layers_mut()[li].weight.data_mut()[idx] += h;
            let mut minus = model.clone();
            minus.layers_mut()[li].weight.data_mut()[idx] -= h;
            let numeric = (objective(&plus, x) - objective(&minus, x)) / (2.0 * h);
            compare(grads.layers[li].weight.data()[idx], numeric);
        }
        for j in 0..layer.bias.len() {
            let mut plus = model.clone();
            plus.layers_mut()[li].bias[j] += h;
            let mut minus = model.clone();
            minus.layers_mut()[li].bias[j] -= h;
            let numeric = (objective(&plus, x) - objective(&minus, x)) / (2.0 * h);
            compare(grads.layers[li].bias[j], numeric);
        }
    }
    for idx in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[idx] += h;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= h;
        let numeric = (objective(model, &xp) - objective(model, &xm)) / (2.0 * h);
        compare(gin.data()[idx], numeric);
    }
    worst
}

#[test]
fn three_layer_gradients_match_finite_differences() {
    let model = init_model(&[4, 6, 5, 3], 7).unwrap();
    let x = tensor(5, 4, 70);
    let up = tensor(5, 3, 71);
    let err = fd_check(&model, &x, &up);
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn softmax_layer_gradients_match_finite_differences() {
    let model = FcnnModel::init(&[3, 4, 3], Activation::Relu, Activation::Softmax, 3).unwrap();
    let err = fd_check(&model, &tensor(4, 3, 30), &tensor(4, 3, 31));
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn softmax_only_on_final_layer() {
    let l = |a| Layer::new(Tensor2::zeros(2, 2), vec![0.0; 2], a).unwrap();
    assert!(FcnnModel::new(vec![l(Activation::Softmax), l(Activation::Identity)]).is_err());
    assert!(FcnnModel::new(vec![l(Activation::Relu), l(Activation::Softmax)]).is_ok());
}

#[test]
fn cross_entropy_uniform_logits_is_ln_c() {
    let (loss, grad) = cross_entropy_loss(&Tensor2::zeros(3, 5), &[0, 4, 2]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-15);
    for row in grad.iter_rows() {
        assert!(row.iter().sum::<f64>().abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_confident_correct_is_near_zero() {
    let logits = Tensor2::from_vec(1, 3, vec![-500.0, 500.0, -500.0]).unwrap();
    let (loss, _) = cross_entropy_loss(&logits, &[1]).unwrap();
    assert!(loss >= 0.0 && loss < 1e-300);
}

#[test]
fn cross_entropy_matches_two_pass_oracle() {
    let logits = tensor(8, 4, 5);
    let labels = [0, 1, 2, 3, 3, 2, 1, 0];
    let (loss, _) = cross_entropy_loss(&logits, &labels).unwrap();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        // Two passes: find max, then sum shifted exponentials.
        let mut m = f64::MIN;
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut s = 0.0;
        for &v in row {
            s += (v - m).exp();
        }
        total += -(row[y] - m - s.ln());
    }
    assert!((loss - total / 8.0).abs() <= 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    assert!(matches!(
        cross_entropy_loss(&Tensor2::zeros(1, 2), &[2]),
        Err(NnError::Input(_))
    ));
}

#[test]
fn init_is_deterministic_and_bounded() {
    let a = init_model(&[4, 8, 2], 1).unwrap();
    let b = init_model(&[4, 8, 2], 1).unwrap();
    assert_eq!(encode_model(&a), encode_model(&b));
    let c = init_model(&[4, 8, 2], 2).unwrap();
    assert_ne!(encode_model(&a), encode_model(&c));
    let bound = (6.0f64 / 12.0).sqrt();
    for layer in a.layers() {
        assert!(layer.weight.data().iter().all(|w| w.abs() <= bound));
    }
}

#[test]
fn init_rejects_short_dims() {
    assert!(init_model(&[4], 1).is_err());
    assert!(init_model(&[], 1).is_err());
}

#[test]
fn encoding_layout() {
    let model = FcnnModel::new(vec![Layer::new(
        Tensor2::from_vec(1, 2, vec![1.0, 2.0]).unwrap(),
        vec![3.0, 4.0],
        Activation::Identity,
    )
    .unwrap()])
    .unwrap();
    let bytes = encode_model(&model);
    assert_eq!(&bytes[..4], b"VFIA");
    assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
    assert_eq!(&bytes[6..10], &1u32.to_le_bytes());
    assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
    assert_eq!(&bytes[14..18], &2u32.to_le_bytes());
    assert_eq!(&bytes[18..26], &1.0f64.to_le_bytes());
    assert_eq!(&bytes[34..42], &3.0f64.to_le_bytes());
    assert_eq!(bytes.len(), 50);
}

#[test]
fn decode_rejects_damaged_streams() {
    let bytes = encode_model(&init_model(&[3, 2], 1).unwrap());
    assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_model(&bad).is_err());
    let mut ver = bytes;
    ver[4] = 9;
    assert!(decode_model(&ver).is_err());
}

proptest! {
    #[test]
    fn encode_decode_roundtrip(dims in proptest::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
        let model = init_model(&dims, seed).unwrap();
        let decoded = decode_model(&encode_model(&model)).unwrap();
        prop_assert_eq!(decoded, model);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let t = Tensor2::from_vec(3, 4, vals).unwrap();
        for row in softmax_rows(&t).iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
