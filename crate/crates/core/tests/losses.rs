use mcan_core::conflict::{diff_loss_micro, macro_losses, orthogonality_loss_micro};
use mcan_core::training::{main_loss, total_loss};
use proptest::prelude::*;

fn vec3(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = prop::collection::vec(-5.0f64..5.0, d);
    (v.clone(), v.clone(), v)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn orthogonality_loss_is_symmetric((t, v, a) in (1usize..16).prop_flat_map(vec3)) {
        let base = orthogonality_loss_micro(&t, &v, &a).unwrap();
        prop_assert!(base >= 0.0);
        for perm in [
            orthogonality_loss_micro(&t, &a, &v),
            orthogonality_loss_micro(&v, &t, &a),
            orthogonality_loss_micro(&v, &a, &t),
            orthogonality_loss_micro(&a, &t, &v),
            orthogonality_loss_micro(&a, &v, &t),
        ] {
            prop_assert!(close(base, perm.unwrap()));
        }
    }

    #[test]
    fn diff_loss_is_symmetric_and_shift_invariant(t in -3.0f64..3.0, v in -3.0f64..3.0, a in -3.0f64..3.0, c in -3.0f64..3.0) {
        let base = diff_loss_micro(t, v, a);
        prop_assert!(base >= 0.0);
        prop_assert!(close(base, diff_loss_micro(a, t, v)));
        prop_assert!(close(base, diff_loss_micro(v, a, t)));
        prop_assert!((base - diff_loss_micro(t + c, v + c, a + c)).abs() <= 1e-10);
    }

    #[test]
    fn macro_losses_are_symmetric(x in prop::collection::vec(-5.0f64..5.0, 8), y in prop::collection::vec(-5.0f64..5.0, 8), p in -3.0f64..3.0, q in -3.0f64..3.0) {
        let (oc, diff) = macro_losses(&x, &y, p, q).unwrap();
        let (oc2, diff2) = macro_losses(&y, &x, q, p).unwrap();
        prop_assert!(close(oc, oc2));
        prop_assert_eq!(diff, diff2);
    }

    #[test]
    fn zero_weights_leave_the_main_loss(main in 0.0f64..10.0, parts in prop::collection::vec(0.0f64..10.0, 4)) {
        let r = total_loss(main, parts[0], parts[1], parts[2], parts[3], 0.0, 0.0).unwrap();
        prop_assert_eq!(r.total, main);
    }
}

#[test]
fn mismatched_widths_are_rejected() {
    assert!(orthogonality_loss_micro(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    assert!(macro_losses(&[1.0], &[1.0, 2.0], 0.0, 0.0).is_err());
    assert!(main_loss(&[1.0], &[]).is_err());
    assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0).is_err());
}
