use pmeta::attention::clip_normalize;
use proptest::prelude::*;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Literal walk: sort ascending (ties by index), drop entries until the
/// dropped mass reaches rho, never all of them, rescale the rest to sum C.
fn reference(pi: &[f64], rho: f64) -> Vec<f64> {
    let c = pi.len();
    let mut order: Vec<usize> = (0..c).collect();
    for i in 1..c {
        let mut j = i;
        while j > 0 && (pi[order[j - 1]] > pi[order[j]]) {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut dropped = 0;
    if rho > 0.0 {
        let mut mass = 0.0;
        for &i in &order {
            if dropped == c - 1 {
                break;
            }
            mass += pi[i];
            dropped += 1;
            if mass >= rho {
                break;
            }
        }
    }
    let mut out = pi.to_vec();
    for &i in &order[..dropped] {
        out[i] = 0.0;
    }
    let kept: f64 = out.iter().sum();
    out.iter().map(|v| v / kept * c as f64).collect()
}

fn support(v: &[f64]) -> Vec<bool> {
    v.iter().map(|x| *x != 0.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn clip_normalize_properties(
        logits in prop::collection::vec(-8.0f64..8.0, 1..48),
        r1 in 0.0f64..1.0,
        r2 in 0.0f64..1.0,
    ) {
        let pi = softmax(&logits);
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let a = clip_normalize(&pi, lo).unwrap();
        let b = clip_normalize(&pi, hi).unwrap();
        let c = pi.len() as f64;
        for v in [&a, &b] {
            prop_assert!(v.iter().all(|x| *x >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - c).abs() <= 1e-9);
        }
        for (x, y) in support(&a).iter().zip(support(&b)) {
            prop_assert!(*x || !y, "support grew with rho");
        }
        for (got, rho) in [(&a, lo), (&b, hi)] {
            let want = reference(&pi, rho);
            prop_assert_eq!(support(got), support(&want));
            for (x, y) in got.iter().zip(&want) {
                prop_assert!((x - y).abs() <= 1e-12 * c, "{} vs {}", x, y);
            }
        }
    }
}

#[test]
fn zero_ratio_keeps_all_channels() {
    let pi = softmax(&[0.3, -1.0, 2.0, 0.0]);
    let out = clip_normalize(&pi, 0.0).unwrap();
    assert!(out.iter().all(|v| *v > 0.0));
}

#[test]
fn rejects_bad_inputs() {
    assert!(clip_normalize(&[0.5, 0.5], 1.0).is_err());
    assert!(clip_normalize(&[0.5, 0.4], 0.1).is_err());
    assert!(clip_normalize(&[1.5, -0.5], 0.1).is_err());
    assert!(clip_normalize(&[f64::NAN, 1.0], 0.1).is_err());
}
