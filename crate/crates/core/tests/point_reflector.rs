//! Point-reflector localization: a single-pixel scatterer simulated with
//! the full wave solver lands within one pixel of its true position in
//! both the adjoint back-projection and the SAFT image. One shared
//! acquisition feeds both tests.

use echotomo_core::geom::{ArrayGeometry, ImageGrid, Pulse};
use echotomo_core::linmodel::build_system_matrix;
use echotomo_core::phantom::SpeedMap;
use echotomo_core::recon::saft_reconstruct;
use echotomo_core::rf::{remove_direct_arrival, RfData};
use echotomo_core::wave::{simulate_all, SimConfig};
use std::sync::OnceLock;

struct Fixture {
    rf: RfData,
    grid: ImageGrid,
    geometry: ArrayGeometry,
    pulse: Pulse,
    point: (usize, usize),
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let grid = ImageGrid { rows: 16, cols: 24, ..Default::default() };
        let geometry = ArrayGeometry {
            n_transducers: 5,
            spacing: 0.08,
            n_samples: 96,
            ..Default::default()
        };
        let pulse = Pulse::default();
        // c_max pinned so the phantom and reference runs share one
        // discrete operator and the direct arrival cancels exactly
        let sim = SimConfig { c_max: Some(4200.0), ..Default::default() };
        let point = (9, 11);
        let mut map = SpeedMap::uniform(grid.rows, grid.cols, 3680.0).with_ambient(&sim);
        map.c[point.0 * grid.cols + point.1] = 4200.0;
        let raw =
            simulate_all(&map.to_medium(sim.refine), &geometry, &grid, &pulse, &sim).unwrap();
        let bg = SpeedMap::uniform(grid.rows, grid.cols, 3680.0).with_ambient(&sim);
        let reference =
            simulate_all(&bg.to_medium(sim.refine), &geometry, &grid, &pulse, &sim).unwrap();
        let rf = remove_direct_arrival(&raw, &reference).unwrap();
        Fixture { rf, grid, geometry, pulse, point }
    })
}

fn argmax_abs(values: &[f64], cols: usize) -> (usize, usize) {
    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
    for (i, &v) in values.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            at = i;
        }
    }
    (at / cols, at % cols)
}

fn within_one_pixel(got: (usize, usize), want: (usize, usize)) -> bool {
    got.0.abs_diff(want.0) <= 1 && got.1.abs_diff(want.1) <= 1
}

#[test]
fn backprojection_peaks_at_the_reflector() {
    let f = fixture();
    let a = build_system_matrix(&f.geometry, &f.grid, &f.pulse, 3680.0, f.grid.pitch).unwrap();
    let bp = a.adjoint_apply(&f.rf.vectorize()).unwrap();
    let got = argmax_abs(&bp, f.grid.cols);
    assert!(within_one_pixel(got, f.point), "peak at {got:?}, reflector at {:?}", f.point);
}

#[test]
fn saft_peaks_at_the_reflector() {
    let f = fixture();
    let img = saft_reconstruct(&f.rf, &f.geometry, &f.grid, &f.pulse, 3680.0).unwrap();
    let got = argmax_abs(&img.values, f.grid.cols);
    assert!(within_one_pixel(got, f.point), "peak at {got:?}, reflector at {:?}", f.point);
}
