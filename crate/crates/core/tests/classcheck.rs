use std::sync::Arc;

use hsd::catalog::TraceInterfacial;
use hsd::density::FnSurface;
use hsd::{
    check_density_class, disarrangement_tensor, pair_by_names, Matrix, Property, SamplingPlan, SurfaceDensity, Verdict,
};
use proptest::prelude::*;

fn squared_norm_pair() -> hsd::DensityPair {
    hsd::DensityPair {
        surface: Arc::new(FnSurface::new("squared-norm", |_, l, _| l.iter().map(|v| v * v).sum())),
        ..pair_by_names("quadratic", "trace-interfacial").unwrap()
    }
}

#[test]
fn catalog_pair_is_in_the_class() {
    let report = check_density_class(
        &pair_by_names("quadratic", "trace-interfacial").unwrap(),
        &SamplingPlan::default(),
    )
    .unwrap();
    assert!(report.all_pass(), "{report:?}");
}

#[test]
fn squared_norm_fails_homogeneity_with_a_witness() {
    let report = check_density_class(&squared_norm_pair(), &SamplingPlan::default()).unwrap();
    let h = &report.properties[&Property::Homogeneity];
    assert_eq!(h.verdict, Verdict::Fail);
    assert!(h.witness.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn enlarging_the_plan_keeps_failures(small in 5usize..60, extra in 1usize..200) {
        let pair = squared_norm_pair();
        let plan = |count| SamplingPlan { count, ..SamplingPlan::default() };
        let a = check_density_class(&pair, &plan(small)).unwrap();
        let b = check_density_class(&pair, &plan(small + extra)).unwrap();
        for (p, v) in &a.properties {
            if v.verdict == Verdict::Fail {
                prop_assert_eq!(b.verdict(*p), Some(Verdict::Fail), "{:?}", p);
            }
        }
    }
}

proptest! {
    #[test]
    fn trace_density_is_symmetric_subadditive_and_homogeneous(
        l1 in prop::collection::vec(-5.0f64..5.0, 2),
        l2 in prop::collection::vec(-5.0f64..5.0, 2),
        angle in 0.0f64..std::f64::consts::TAU,
        t in 0.0f64..5.0,
    ) {
        let psi = TraceInterfacial { scale: 1.0 };
        let x = [0.0, 0.0];
        let nu = [angle.cos(), angle.sin()];
        let v = |l: &[f64], n: &[f64]| psi.value(&x, l, n).unwrap();
        let neg = |l: &[f64]| l.iter().map(|a| -a).collect::<Vec<f64>>();
        let sum: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| a + b).collect();
        let scaled: Vec<f64> = l1.iter().map(|a| t * a).collect();
        prop_assert!((v(&l1, &nu) - v(&neg(&l1), &neg(&nu))).abs() <= 1e-12);
        prop_assert!(v(&sum, &nu) <= v(&l1, &nu) + v(&l2, &nu) + 1e-12);
        prop_assert!((v(&scaled, &nu) - t * v(&l1, &nu)).abs() <= 1e-12 * (1.0 + t * v(&l1, &nu)));
    }

    #[test]
    fn disarrangement_of_equal_arguments_vanishes(v in prop::collection::vec(-5.0f64..5.0, 6)) {
        let a = Matrix::from_row_major(2, 3, v).unwrap();
        prop_assert_eq!(disarrangement_tensor(&a, &a).unwrap().max_abs(), 0.0);
    }
}

#[test]
fn disarrangement_examples() {
    let i = Matrix::identity(2);
    assert_eq!(disarrangement_tensor(&i, &Matrix::zeros(2, 2)).unwrap(), i);
    assert_eq!(disarrangement_tensor(&i, &(&i * 0.5)).unwrap(), &i * 0.5);
    assert!(disarrangement_tensor(&i, &Matrix::zeros(2, 3)).is_err());
}
