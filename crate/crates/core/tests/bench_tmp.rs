use gaitasms::tensor::{conv3d, backward, no_grad, sum_all, ConvSpec, Tensor};
use std::time::Instant;

fn timeit(label: &str, macs: f64, mut f: impl FnMut()) {
    let iters = 10;
    let start = Instant::now();
    for _ in 0..iters { f(); }
    let el = start.elapsed().as_secs_f64() / iters as f64;
    println!("{label}: {:.1} ms, {:.2} GMAC/s", el * 1e3, macs / el / 1e9);
}

#[test]
#[ignore]
fn conv_speed() {
    let n = 16; let t = 30;
    let (ci, co, h, w) = (8, 8, 64, 22);
    let x = Tensor::param(vec![n, ci, t, h, w], vec![0.5; n*ci*t*h*w]).unwrap();
    let wt = Tensor::param(vec![co, ci, 3, 1, 1], vec![0.1; co*ci*3]).unwrap();
    let spec = ConvSpec::temporal(3, 2).unwrap();
    let macs = (n*co*t*h*w*ci*3) as f64;
    timeit("temporal fwd only (no_grad)", macs, || { no_grad(|| { conv3d(&x, &wt, None, &spec).unwrap(); }) });
    timeit("temporal fwd (graph)", macs, || { conv3d(&x, &wt, None, &spec).unwrap(); });
    timeit("temporal fwd+bwd", 3.0*macs, || {
        let y = conv3d(&x, &wt, None, &spec).unwrap();
        let l = sum_all(&y);
        backward(&l).unwrap();
        x.zero_grad(); wt.zero_grad();
    });

    let (ci2, co2, h2, w2) = (1usize, 2usize, 64usize, 44usize);
    let x2 = Tensor::param(vec![n, ci2, t, h2, w2], vec![0.5; n*ci2*t*h2*w2]).unwrap();
    let wt2 = Tensor::param(vec![co2, ci2, 3, 3, 3], vec![0.1; co2*ci2*27]).unwrap();
    let spec2 = ConvSpec::same_cube(3).unwrap();
    let macs2 = (n*co2*t*h2*w2*ci2*27) as f64;
    timeit("cube fwd only", macs2, || { no_grad(|| { conv3d(&x2, &wt2, None, &spec2).unwrap(); }) });
    timeit("cube fwd+bwd", 3.0*macs2, || {
        let y = conv3d(&x2, &wt2, None, &spec2).unwrap();
        let l = sum_all(&y);
        backward(&l).unwrap();
        x2.zero_grad(); wt2.zero_grad();
    });
}
