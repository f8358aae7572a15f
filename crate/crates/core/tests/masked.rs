mod common;

use common::{dense_then_mask, max_rel, random_network, scores};
use pmeta::layers::{self, ChannelMask, StoredInput};
use pmeta::spec::LayerSpec;
use pmeta::{Rng, Tensor};

#[test]
fn masked_gradient_equals_dense_then_mask() {
    let mut rng = Rng::new(21);
    let mut checked = 0;
    for _ in 0..50 {
        let spec = random_network(&mut rng);
        let shapes = spec.shapes().unwrap();
        let b = 1 + rng.below(3);
        for (i, l) in spec.layers.iter().enumerate() {
            let Some((ci, co)) = layers::mask_channels(l) else { continue };
            let mut xs = vec![b];
            xs.extend(shapes[i].dims());
            let mut ys = vec![b];
            ys.extend(shapes[i + 1].dims());
            let x = Tensor::randn(&xs, 1.0, &mut rng);
            let x = if matches!(l, LayerSpec::FullyConnected { .. }) { x.reshape(&[b, ci]).unwrap() } else { x };
            let gy = Tensor::randn(&ys, 1.0, &mut rng);
            let mask = ChannelMask::new(scores(ci, &mut rng), scores(co, &mut rng)).unwrap();
            let st = StoredInput::capture(&x, &mask.fw).unwrap();
            let got = match l {
                LayerSpec::Conv2d { .. } => layers::conv_weight_grad_masked(l, &st, &gy, &mask).unwrap(),
                LayerSpec::FullyConnected { .. } => layers::fc_weight_grad_masked(&st, &gy, &mask).unwrap(),
                _ => layers::group_norm_weight_grad_masked(&st, &gy, &mask).unwrap(),
            };
            let [w, bias] = dense_then_mask(l, &x, &gy, &mask);
            assert!(max_rel(&got.w, &w) <= 1e-12, "{l}: weights differ by {:e}", max_rel(&got.w, &w));
            assert!(max_rel(&got.b, &bias) <= 1e-12, "{l}: biases differ");
            for (a, b) in got.w.data().iter().zip(w.data()) {
                assert_eq!(*a == 0.0, *b == 0.0, "{l}: zero pattern differs");
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 150);
}

#[test]
fn stored_input_keeps_only_scored_channels() {
    let x = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let st = StoredInput::capture(&x, &[0.5, 0.0, 2.0]).unwrap();
    assert_eq!(st.channels, vec![0, 2]);
    assert_eq!(st.data, vec![0.5, 1.0, 10.0, 12.0]);
    assert_eq!(st.words(), 4);
}
