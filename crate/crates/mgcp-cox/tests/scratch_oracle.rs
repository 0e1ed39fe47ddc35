// Temporary diagnostic: oracle AUC feasibility per cell (developer use only).
use mgcp_cox::datagen::{gen_dataset, GenConfig};
use mgcp_cox::quadrature::GaussLegendre;

fn quadratic_fit(times: &[f64], values: &[f64]) -> [f64; 3] {
    let n = times.len() as f64;
    let mut s = [0.0f64; 5];
    let mut m = [0.0f64; 3];
    for (&t, &v) in times.iter().zip(values) {
        let t2 = t * t;
        s[0] += t;
        s[1] += t2;
        s[2] += t2 * t;
        s[3] += t2 * t2;
        m[0] += v;
        m[1] += v * t;
        m[2] += v * t2;
    }
    let a = nalgebra::Matrix3::new(n, s[0], s[1], s[0], s[1], s[2], s[1], s[2], s[3]);
    let b = nalgebra::Vector3::new(m[0], m[1], m[2]);
    match a.lu().solve(&b) {
        Some(sol) if sol.iter().all(|x| x.is_finite()) => [sol[0], sol[1], sol[2]],
        _ => {
            let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
            [mean, 0.0, 0.0]
        }
    }
}

fn auc(scores: &[(f64, bool)]) -> f64 {
    let mut s = 0.0;
    let mut pairs = 0.0;
    for (si, li) in scores {
        for (sj, lj) in scores {
            if *li && !*lj {
                pairs += 1.0;
                s += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    if pairs == 0.0 {
        f64::NAN
    } else {
        s / pairs
    }
}

#[test]
#[ignore]
fn oracle_feasibility() {
    let quad = GaussLegendre::new(64);
    for per_unit in [true, false] {
        eprintln!("=== accel_per_unit = {per_unit} ===");
        for alpha in [0.3, 0.5] {
            for window in [12.0, 15.0, 20.0] {
                let mut scores: Vec<(f64, bool)> = Vec::new();
                for rep in 0..100u64 {
                    let gen_cfg = GenConfig {
                        seed: 11u64.wrapping_add(rep.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                        accel_per_unit: per_unit,
                        ..GenConfig::default()
                    };
                    let units = gen_dataset(&gen_cfg).unwrap();
                    let Some(test_idx) = units.iter().rposition(|u| {
                        u.event_observed
                            && u.times.first().is_some_and(|&t0| 0.3 * u.event_time >= t0)
                    }) else {
                        continue;
                    };
                    let u = &units[test_idx];
                    let t_star = alpha * u.event_time;
                    let label = u.event_time <= t_star + window;
                    let coef = quadratic_fit(&u.times, &u.values);
                    let hazard = |t: f64| {
                        0.001
                            * 1.05
                            * t.powf(0.05)
                            * (0.5 * (coef[0] + coef[1] * t + coef[2] * t * t)).exp()
                    };
                    let cum = quad.integrate(t_star, t_star + window, hazard);
                    scores.push((1.0 - (-cum).exp(), label));
                }
                let n_pos = scores.iter().filter(|(_, l)| *l).count();
                eprintln!(
                    "alpha={alpha} window={window}: oracle AUC {:.3} ({n_pos}+/{}-)",
                    auc(&scores),
                    scores.len() - n_pos
                );
            }
        }
    }
}
