use proptest::prelude::*;
use urllc_lab::experiments::trajectory_preset;
use urllc_lab::mobility::{
    eval_error_table, gen_trajectory, newton_predict, NewtonPredictor, Point, Predictor, Trajectory, TrajectoryKind,
};

fn quadratic(c: [[f64; 3]; 3], t: f64) -> Point {
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = c[k][0] + c[k][1] * t + c[k][2] * t * t;
    }
    p
}

fn coeff() -> impl Strategy<Value = [[f64; 3]; 3]> {
    prop::array::uniform3(prop::array::uniform3(-1.0f64..1.0))
}

proptest! {
    // A least-squares quadratic fit reproduces any quadratic, so the
    // forecast equals the true future position.
    #[test]
    fn newton_reproduces_quadratics(c in coeff(), history in 3usize..80, h in 1usize..30, t0 in -50.0f64..50.0) {
        let pts: Vec<Point> = (0..history).map(|k| quadratic(c, t0 + k as f64)).collect();
        let want = quadratic(c, t0 + (history - 1 + h) as f64);
        let got = newton_predict(&pts, h).unwrap();
        for k in 0..3 {
            prop_assert!((got[k] - want[k]).abs() <= 1e-9 * (1.0 + want[k].abs()), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn newton_is_linear(a in coeff(), b in coeff(), noise in prop::collection::vec(-1e-3f64..1e-3, 150), alpha in -2.0f64..2.0) {
        let p = NewtonPredictor::new(50, 20);
        let x: Vec<Point> = (0..50).map(|k| { let q = quadratic(a, k as f64 * 1e-3); [q[0] + noise[3 * k], q[1] + noise[3 * k + 1], q[2] + noise[3 * k + 2]] }).collect();
        let y: Vec<Point> = (0..50).map(|k| quadratic(b, (k as f64 * 0.37).sin())).collect();
        let mix: Vec<Point> = x.iter().zip(&y).map(|(u, v)| [u[0] + alpha * v[0], u[1] + alpha * v[1], u[2] + alpha * v[2]]).collect();
        for h in [1, 5, 20] {
            let (px, py, pm) = (p.predict(&x, h).unwrap(), p.predict(&y, h).unwrap(), p.predict(&mix, h).unwrap());
            for k in 0..3 {
                prop_assert!((pm[k] - (px[k] + alpha * py[k])).abs() < 1e-9);
            }
        }
    }
}

/// The least-squares weights, solved independently by Gaussian elimination
/// on the 3x3 normal equations of the monomial basis with t = 1..=m.
fn lsq_predict(history: &[Point], h: usize) -> Point {
    let m = history.len();
    let ts: Vec<f64> = (1..=m).map(|t| t as f64).collect();
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let mut a = [[0.0f64; 4]; 3];
        for (t, p) in ts.iter().zip(history) {
            let basis = [1.0, *t, t * t];
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] += basis[i] * basis[j];
                }
                a[i][3] += basis[i] * p[axis];
            }
        }
        for col in 0..3 {
            let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for row in 0..3 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..4 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..3).map(|i| a[i][3] / a[i][i]).collect();
        let t = (m + h) as f64;
        out[axis] = coef[0] + coef[1] * t + coef[2] * t * t;
    }
    out
}

#[test]
fn newton_matches_independent_least_squares_on_sinusoid() {
    let kind = trajectory_preset("sinusoid").unwrap();
    let traj = gen_trajectory(&kind, 5_000, 0.0, 0).unwrap();
    let p = NewtonPredictor::new(50, 20);
    for start in [0, 777, 3_100, 4_900 - 50] {
        let hist = &traj.positions[start..start + 50];
        for h in [1, 5, 10, 20] {
            let (got, want) = (p.predict(hist, h).unwrap(), lsq_predict(hist, h));
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-9, "start {start} h {h}: {got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn newton_is_exact_on_constant_acceleration() {
    let traj = gen_trajectory(&trajectory_preset("const_accel").unwrap(), 120_000, 0.0, 1).unwrap();
    let cells = eval_error_table(&Predictor::newton(), &traj, &[5, 10, 20], &[0.005], 1).unwrap();
    assert!(cells.iter().all(|c| c.errors == 0), "{cells:?}");
}

#[test]
fn error_table_is_independent_of_jobs() {
    let traj = gen_trajectory(&TrajectoryKind::smooth_random(), 150_000, 5e-4, 4).unwrap();
    let one = eval_error_table(&Predictor::newton(), &traj, &[5, 10, 20], &[0.02, 0.005], 1).unwrap();
    let four = eval_error_table(&Predictor::newton(), &traj, &[5, 10, 20], &[0.02, 0.005], 4).unwrap();
    assert_eq!(one, four);
}

#[test]
fn trajectories_are_seeded() {
    let k = TrajectoryKind::smooth_random();
    assert_eq!(gen_trajectory(&k, 2_000, 5e-4, 11).unwrap(), gen_trajectory(&k, 2_000, 5e-4, 11).unwrap());
    assert_ne!(gen_trajectory(&k, 2_000, 5e-4, 11).unwrap(), gen_trajectory(&k, 2_000, 5e-4, 12).unwrap());
}

#[test]
fn csv_roundtrip() {
    let t = gen_trajectory(&TrajectoryKind::smooth_random(), 500, 5e-4, 2).unwrap();
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    assert_eq!(Trajectory::read_csv(buf.as_slice()).unwrap(), t);
    assert!(Trajectory::read_csv("t_ms,x,y,z\n0,1,2,3\n2,1,2,3\n".as_bytes()).is_err());
}
