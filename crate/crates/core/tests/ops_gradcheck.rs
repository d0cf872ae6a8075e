use normkit::gradcheck::{finite_diff, finite_diff_slice, InputReport, DEFAULT_STEP};
use normkit::ops::{
    conv2d_backward, conv2d_forward, global_avg_pool_backward, global_avg_pool_forward, linear_backward,
    linear_forward, relu_backward, relu_forward, softmax_cross_entropy, ConvGeometry,
};
use normkit::rng::{normal_tensor, SeededRng};
use normkit::{Matrix, Shape4, Tensor4};

const TOL: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assert_close(name: &str, analytic: &[f64], numeric: &[f64]) {
    let r = InputReport::compare(name, analytic, numeric);
    assert!(r.max_rel_error <= TOL || r.max_abs_error <= 1e-9, "{name}: {r:?}");
}

#[test]
fn conv_gradients() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut rng = SeededRng::new(stride as u64 * 10 + pad as u64);
        let geom = ConvGeometry::new(stride, pad);
        let x: Tensor4<f64> = normal_tensor(&mut rng, Shape4::new(2, 3, 5, 4), 1.0);
        let w: Tensor4<f64> = normal_tensor(&mut rng, Shape4::new(4, 3, 3, 3), 0.5);
        let b: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let out_shape = geom.output_shape(x.shape(), w.shape()).unwrap();
        let probe: Tensor4<f64> = normal_tensor(&mut rng, out_shape, 1.0);
        let loss = |x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]| {
            let (y, _) = conv2d_forward(x, w, b, geom)?;
            Ok(dot(y.data(), probe.data()))
        };
        let (_, cache) = conv2d_forward(&x, &w, &b, geom).unwrap();
        let (dx, dw, db) = conv2d_backward(&cache, &probe).unwrap();
        assert_close("dx", dx.data(), finite_diff(|t| loss(t, &w, &b), &x, DEFAULT_STEP).unwrap().data());
        assert_close("dw", dw.data(), finite_diff(|t| loss(&x, t, &b), &w, DEFAULT_STEP).unwrap().data());
        assert_close("db", &db, &finite_diff_slice(|t| loss(&x, &w, t), &b, DEFAULT_STEP).unwrap());
    }
}

#[test]
fn linear_gradients() {
    let mut rng = SeededRng::new(9);
    let x: Tensor4<f64> = normal_tensor(&mut rng, Shape4::new(3, 4, 1, 2), 1.0);
    let wt: Tensor4<f64> = normal_tensor(&mut rng, Shape4::new(1, 1, 5, 8), 1.0);
    let w = Matrix::from_vec(5, 8, wt.data().to_vec()).unwrap();
    let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let probe: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
    let loss = |x: &Tensor4<f64>, w: &[f64], b: &[f64]| {
        let w = Matrix::from_vec(5, 8, w.to_vec())?;
        let (y, _) = linear_forward(x, &w, b)?;
        Ok(dot(y.data(), &probe))
    };
    let (_, cache) = linear_forward(&x, &w, &b).unwrap();
    let dy = Matrix::from_vec(3, 5, probe.clone()).unwrap();
    let (dx, dw, db) = linear_backward(&cache, &dy).unwrap();
    assert_close("dx", dx.data(), finite_diff(|t| loss(t, w.data(), &b), &x, DEFAULT_STEP).unwrap().data());
    assert_close("dw", dw.data(), &finite_diff_slice(|t| loss(&x, t, &b), w.data(), DEFAULT_STEP).unwrap());
    assert_close("db", &db, &finite_diff_slice(|t| loss(&x, w.data(), t), &b, DEFAULT_STEP).unwrap());
}

#[test]
fn relu_and_pool_gradients() {
    let mut rng = SeededRng::new(12);
    // Keep inputs away from the kink so central differences are valid.
    let x: Tensor4<f64> = normal_tensor::<f64>(&mut rng, Shape4::new(2, 3, 3, 3), 1.0).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let probe: Tensor4<f64> = normal_tensor(&mut rng, Shape4::new(2, 3, 1, 1), 1.0);
    let loss = |x: &Tensor4<f64>| {
        let (r, _) = relu_forward(x);
        Ok(dot(global_avg_pool_forward(&r).data(), probe.data()))
    };
    let (r, relu_cache) = relu_forward(&x);
    let dpool = global_avg_pool_backward(r.shape(), &probe).unwrap();
    let dx = relu_backward(&relu_cache, &dpool).unwrap();
    assert_close("dx", dx.data(), finite_diff(loss, &x, DEFAULT_STEP).unwrap().data());
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = SeededRng::new(3);
    let logits: Vec<f64> = (0..12).map(|_| 3.0 * rng.normal()).collect();
    let labels = [0, 3, 1];
    let loss = |l: &[f64]| Ok(softmax_cross_entropy(&Matrix::from_vec(3, 4, l.to_vec())?, &labels)?.0);
    let (_, grad) = softmax_cross_entropy(&Matrix::from_vec(3, 4, logits.clone()).unwrap(), &labels).unwrap();
    assert_close("dlogits", grad.data(), &finite_diff_slice(loss, &logits, DEFAULT_STEP).unwrap());
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let logits = Matrix::from_vec(1, 3, vec![1000.0f64, 0.0, -1000.0]).unwrap();
    let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
    assert!(loss.abs() < 1e-12);
    assert!(grad.data().iter().all(|v| v.is_finite()));
}
