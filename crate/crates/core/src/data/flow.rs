use crate::tensor::Tensor;

/// Three-channel flow image: `(dx, dy)` mapped to `[0, 1]` around 0.5 and
/// the magnitude in the last channel, all relative to `max_mag`.
pub fn flow_to_rgb(dx: &Tensor, dy: &Tensor, max_mag: f64) -> Tensor {
    assert!(max_mag > 0.0, "max_mag must be positive");
    let (h, w) = (dx.shape()[0], dx.shape()[1]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    let o = out.data_mut();
    for i in 0..hw {
        let (x, y) = (dx.data()[i], dy.data()[i]);
        o[i] = (x / max_mag).clamp(-1.0, 1.0) / 2.0 + 0.5;
        o[hw + i] = (y / max_mag).clamp(-1.0, 1.0) / 2.0 + 0.5;
        o[2 * hw + i] = (x.hypot(y) / max_mag).clamp(0.0, 1.0);
    }
    out
}

/// Inverse of [`flow_to_rgb`] within the clamp range; returns `(dx, dy)`.
pub fn rgb_to_flow(rgb: &Tensor, max_mag: f64) -> (Tensor, Tensor) {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let hw = h * w;
    let d = rgb.data();
    let dx = Tensor::from_fn(&[h, w], |i| (d[i] - 0.5) * 2.0 * max_mag);
    let dy = Tensor::from_fn(&[h, w], |i| (d[hw + i] - 0.5) * 2.0 * max_mag);
    (dx, dy)
}
