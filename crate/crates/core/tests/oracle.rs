use std::sync::Arc;

use hsd::catalog::{PPower, Quadratic, TraceInterfacial};
use hsd::oracle::{exact_psi, exact_wk};
use hsd::{BulkDensity, Matrix, SurfaceDensity};
use proptest::prelude::*;

fn matrix2() -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, 4).prop_map(|v| Matrix::from_row_major(2, 2, v).unwrap())
}

fn base() -> impl Strategy<Value = Arc<dyn BulkDensity>> {
    prop_oneof![
        Just(Arc::new(Quadratic) as Arc<dyn BulkDensity>),
        (1.2f64..4.0).prop_map(|p| Arc::new(PPower { p }) as Arc<dyn BulkDensity>),
    ]
}

fn unit2() -> impl Strategy<Value = Vec<f64>> {
    (0.0f64..std::f64::consts::TAU).prop_map(|t| vec![t.cos(), t.sin()])
}

proptest! {
    #[test]
    fn equal_arguments_reduce_to_the_base(w0 in base(), a in matrix2(), k in 0usize..5) {
        let v = exact_wk(w0.as_ref(), &[0.0, 0.0], &a, &vec![a.clone(); k]).unwrap();
        prop_assert_eq!(v, w0.value(&[0.0, 0.0], &a).unwrap());
    }

    #[test]
    fn duplicating_an_entry_changes_nothing(
        w0 in base(),
        a in matrix2(),
        tuple in prop::collection::vec(matrix2(), 1..5),
        at in any::<prop::sample::Index>(),
    ) {
        let j = at.index(tuple.len());
        let mut longer = tuple.clone();
        longer.insert(j, tuple[j].clone());
        let v = exact_wk(w0.as_ref(), &[0.0, 0.0], &a, &tuple).unwrap();
        let w = exact_wk(w0.as_ref(), &[0.0, 0.0], &a, &longer).unwrap();
        prop_assert!((v - w).abs() <= 1e-12 * (1.0 + v));
    }

    #[test]
    fn lipschitz_in_the_trace_of_the_first_argument(
        a in matrix2(),
        a2 in matrix2(),
        tuple in prop::collection::vec(matrix2(), 1..5),
    ) {
        let x = [0.0, 0.0];
        let v = exact_wk(&Quadratic, &x, &a, &tuple).unwrap();
        let w = exact_wk(&Quadratic, &x, &a2, &tuple).unwrap();
        let dt = (&a - &a2).trace().unwrap().abs();
        prop_assert!((v - w).abs() <= dt + 1e-12 * (1.0 + v + w));
    }

    #[test]
    fn surface_density_is_the_trace_interfacial_one(lambda in prop::collection::vec(-5.0f64..5.0, 2), nu in unit2()) {
        let psi = exact_psi(&lambda, &nu).unwrap();
        prop_assert_eq!(psi, TraceInterfacial { scale: 1.0 }.value(&[0.0, 0.0], &lambda, &nu).unwrap());
        let flipped: Vec<f64> = lambda.iter().map(|v| -v).collect();
        let back: Vec<f64> = nu.iter().map(|v| -v).collect();
        prop_assert_eq!(psi, exact_psi(&flipped, &back).unwrap());
    }
}

#[test]
fn shape_errors() {
    let a = Matrix::identity(2);
    assert!(exact_wk(&Quadratic, &[0.0, 0.0], &a, &[Matrix::identity(3)]).is_err());
    assert!(exact_psi(&[1.0, 0.0], &[1.0, 1.0]).is_err());
    assert!(exact_psi(&[1.0], &[1.0, 0.0]).is_err());
}
