use std::ffi::{CStr, CString};
use std::ptr;

use qcml_ffi::*;

fn grid(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(n * 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let a = (i as f64 * 0.37).sin();
        let b = (i as f64 * 0.11).cos();
        x.extend([a, b]);
        y.push(2.0 * a - b);
    }
    (x, y)
}

fn last_error() -> String {
    let p = qcml_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_train_forecast_embed_and_reload() {
    let (x, y) = grid(40);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.model").to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(qcml_model_train(x.as_ptr(), 40, 2, y.as_ptr(), 3, 20, 0.01, 7, &mut m), QcmlStatus::Ok);
        assert_eq!(qcml_model_n_features(m), 2);
        assert_eq!(qcml_model_hilbert_dim(m), 3);

        let mut f = 0.0;
        assert_eq!(qcml_model_forecast(m, x.as_ptr(), 2, &mut f), QcmlStatus::Ok);
        assert!(f.is_finite());

        let (mut re, mut im) = ([0.0; 3], [0.0; 3]);
        assert_eq!(qcml_model_embed(m, x.as_ptr(), 2, re.as_mut_ptr(), im.as_mut_ptr(), 3), QcmlStatus::Ok);
        let norm: f64 = re.iter().zip(&im).map(|(a, b)| a * a + b * b).sum();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(
            qcml_model_embed(m, x.as_ptr(), 2, re.as_mut_ptr(), im.as_mut_ptr(), 2),
            QcmlStatus::InvalidArgument
        );

        assert_eq!(qcml_model_save(m, path.as_ptr()), QcmlStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(qcml_model_load(path.as_ptr(), &mut back), QcmlStatus::Ok);
        let mut g = 0.0;
        assert_eq!(qcml_model_forecast(back, x.as_ptr(), 2, &mut g), QcmlStatus::Ok);
        assert_eq!(f.to_bits(), g.to_bits());

        let models = [m as *const QcmlModel, back as *const QcmlModel];
        let mut p = ptr::null_mut();
        assert_eq!(qcml_proximity_qcml(models.as_ptr(), 2, x.as_ptr(), 5, x.as_ptr(), 40, 2, &mut p), QcmlStatus::Ok);
        assert_eq!((qcml_proximity_rows(p), qcml_proximity_cols(p)), (5, 40));
        let mut v = 0.0;
        assert_eq!(qcml_proximity_get(p, 0, 0, &mut v), QcmlStatus::Ok);
        assert!((v - 1.0).abs() < 1e-9);
        qcml_proximity_free(p);
        qcml_model_free(m);
        qcml_model_free(back);
    }
}

#[test]
fn forest_gap_rows_sum_to_one() {
    let (x, y) = grid(60);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("f.bin").to_str().unwrap()).unwrap();
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(qcml_forest_fit(x.as_ptr(), 60, 2, y.as_ptr(), 50, 20, 1, 0, 0, 3, &mut f), QcmlStatus::Ok);
        let mut p = ptr::null_mut();
        assert_eq!(qcml_forest_prox_gap_train(f, &mut p), QcmlStatus::Ok);
        let mut vals = vec![0.0; 3600];
        assert_eq!(qcml_proximity_copy(p, vals.as_mut_ptr(), vals.len()), QcmlStatus::Ok);
        for row in vals.chunks(60) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
        }
        let proxpath = CString::new(dir.path().join("p.qprx").to_str().unwrap()).unwrap();
        assert_eq!(qcml_proximity_save(p, proxpath.as_ptr()), QcmlStatus::Ok);
        let mut q = ptr::null_mut();
        assert_eq!(qcml_proximity_load(proxpath.as_ptr(), &mut q), QcmlStatus::Ok);
        let mut a = 0.0;
        assert_eq!(qcml_proximity_get(q, 3, 7, &mut a), QcmlStatus::Ok);
        assert_eq!(a, vals[3 * 60 + 7]);
        qcml_proximity_free(p);
        qcml_proximity_free(q);

        let mut pred = 0.0;
        assert_eq!(qcml_forest_predict(f, x.as_ptr(), 2, &mut pred), QcmlStatus::Ok);
        assert_eq!(qcml_forest_save(f, path.as_ptr()), QcmlStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(qcml_forest_load(path.as_ptr(), &mut g), QcmlStatus::Ok);
        let mut pred2 = 0.0;
        assert_eq!(qcml_forest_predict(g, x.as_ptr(), 2, &mut pred2), QcmlStatus::Ok);
        assert_eq!(pred, pred2);

        let mut qp = ptr::null_mut();
        assert_eq!(qcml_forest_prox_gap_query(g, x.as_ptr(), 4, 2, &mut qp), QcmlStatus::Ok);
        assert_eq!((qcml_proximity_rows(qp), qcml_proximity_cols(qp)), (4, 60));
        qcml_proximity_free(qp);
        qcml_forest_free(f);
        qcml_forest_free(g);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut out = 0.0;
        assert_eq!(qcml_model_forecast(ptr::null(), ptr::null(), 0, &mut out), QcmlStatus::NullPointer);
        assert!(last_error().contains("model"));

        let missing = CString::new("/nonexistent/dir/x.model").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(qcml_model_load(missing.as_ptr(), &mut m), QcmlStatus::Io);
        assert!(m.is_null());

        let (x, y) = grid(10);
        let mut f = ptr::null_mut();
        assert_eq!(
            qcml_forest_fit(x.as_ptr(), 10, 2, y.as_ptr(), 5, 5, 1, 0, 9, 0, &mut f),
            QcmlStatus::InvalidArgument
        );
        assert!(last_error().contains("criterion"));

        qcml_model_free(ptr::null_mut());
        qcml_forest_free(ptr::null_mut());
        qcml_proximity_free(ptr::null_mut());
        assert_eq!(qcml_proximity_rows(ptr::null()), 0);
    }
    let v = unsafe { CStr::from_ptr(qcml_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
