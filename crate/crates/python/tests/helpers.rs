use scalemix::covmodel::CovKind;
use scalemix_py::{matrix_from_rows, parse_kind, rows_of};

#[test]
fn rows_round_trip() {
    let rows = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]];
    let m = matrix_from_rows(&rows).unwrap();
    assert_eq!((m.nrows(), m.ncols()), (2, 3));
    assert_eq!(rows_of(&m), rows);
}

#[test]
fn ragged_rows_are_rejected() {
    assert!(matrix_from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
}

#[test]
fn covariance_kind_names() {
    assert_eq!(parse_kind("exponential").unwrap(), CovKind::PoweredExponential);
    assert_eq!(parse_kind("powered_exponential").unwrap(), CovKind::PoweredExponential);
    assert_eq!(parse_kind("matern").unwrap(), CovKind::Matern);
    assert!(parse_kind("spherical").unwrap_err().to_string().contains("spherical"));
}
