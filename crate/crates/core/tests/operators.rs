use fwn::frackernel::{
    apply_m_fft, apply_m_quadrature, apply_m_squared, apply_m_squared_quadrature, inner_product_h,
    GridFunction, HurstModel, KernelOptions, Profile, UniformGrid,
};
use fwn::wiscalc::product_moment;

const FFT_TOL: f64 = 1e-3;

fn gaussian_pair(grid: UniformGrid) -> (Profile, GridFunction) {
    let p = Profile::gaussian(0.4);
    let g = GridFunction::sample(grid, |x| (-(x - 0.4f64).powi(2)).exp()).unwrap();
    (p, g)
}

#[test]
fn fft_and_quadrature_realizations_agree_on_4096_nodes() {
    let grid = UniformGrid::symmetric(20.0, 4096).unwrap();
    let kopts = KernelOptions::default();
    for h in [0.6, 0.75, 0.9] {
        let m = HurstModel::new(h).unwrap();
        let (p, g) = gaussian_pair(grid);
        let mf = apply_m_fft(&m, &g).unwrap();
        let m2f = apply_m_squared(&m, &g).unwrap();
        let scale = mf.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale2 = m2f.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for x in [-3.0, -1.0, 0.0, 0.4, 1.3, 3.0] {
            let i = mf.index_of(x);
            let xi = grid.node(i);
            let q = apply_m_quadrature(&m, &p, xi, &kopts).unwrap();
            assert!(
                (mf.values[i] - q).abs() < FFT_TOL * scale,
                "H={h} M x={xi}: {} vs {q}",
                mf.values[i]
            );
            let q2 = apply_m_squared_quadrature(&m, &p, xi, &kopts).unwrap();
            assert!(
                (m2f.values[i] - q2).abs() < FFT_TOL * scale2,
                "H={h} M2 x={xi}: {} vs {q2}",
                m2f.values[i]
            );
        }
    }
}

#[test]
fn inner_product_matches_windowed_isometry() {
    // (χ_[0,t], χ_[0,s])_H is the fBm covariance.
    let grid = UniformGrid::symmetric(16.0, 8192).unwrap();
    let m = HurstModel::new(0.75).unwrap();
    let ind = |lo: f64, hi: f64| {
        GridFunction::sample(grid, move |x| if x >= lo && x < hi { 1.0 } else { 0.0 }).unwrap()
    };
    let ip = inner_product_h(&m, &ind(0.0, 1.0), &ind(0.0, 0.5)).unwrap();
    let cov = m.covariance(1.0, 0.5);
    assert!((ip - cov).abs() < 5e-3 * cov, "{ip} vs {cov}");
    let pm = product_moment(
        &m,
        &Profile::new(|_| 1.0),
        &Profile::indicator(0.0, 0.5),
        1.0,
    )
    .unwrap();
    assert!((pm - cov).abs() < 1e-7, "{pm} vs {cov}");
}
