use hybrid_vi_web::{exact_json, simulate_json, smooth_json, Posterior, Simulation};

const MODEL: &str = r#"
modes = 2
state_dim = 1
rates = [[0.0, 0.2], [0.2, 0.0]]

[observation]
covariance = 0.1

[[mode]]
alpha = 1.5
beta = -1.0
dispersion = 0.25
p0 = 0.5
mu0 = -1.0
sigma0 = 0.2

[[mode]]
alpha = 1.5
beta = 1.0
dispersion = 0.25
p0 = 0.5
mu0 = 1.0
sigma0 = 0.2
"#;

fn simulation(seed: u64) -> (String, Simulation) {
    let json = simulate_json(MODEL, 3.0, 0.01, 4.0, seed).unwrap();
    let sim: Simulation = serde_json::from_str(&json).unwrap();
    (json, sim)
}

fn observations_json(sim: &Simulation) -> String {
    serde_json::to_string(&sim.observations).unwrap()
}

#[test]
fn simulation_has_one_entry_per_node_and_is_seeded() {
    let (json, sim) = simulation(3);
    assert_eq!(sim.times.len(), 301);
    assert_eq!(sim.modes.len(), 301);
    assert_eq!(sim.states.len(), 301);
    assert!(sim.modes.iter().all(|&z| z < 2));
    assert!(!sim.observations.times.is_empty());
    assert_eq!(simulation(3).0, json);
    assert_ne!(simulation(4).0, json);
}

#[test]
fn smoothing_and_exact_solution_agree_on_the_likely_mode() {
    let (_, sim) = simulation(5);
    let obs = observations_json(&sim);
    let vi: Posterior = serde_json::from_str(&smooth_json(MODEL, &obs, 3.0, 0.01).unwrap()).unwrap();
    let exact: Posterior = serde_json::from_str(&exact_json(MODEL, &obs, 3.0, 0.01, 300).unwrap()).unwrap();
    assert!(vi.converged);
    assert_eq!(vi.q.len(), 301);
    assert_eq!(exact.q.len(), 301);
    for q in &vi.q {
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
    let argmax = |q: &[f64]| usize::from(q[1] > q[0]);
    let agree = vi.q.iter().zip(&exact.q).filter(|(a, b)| argmax(a) == argmax(b)).count();
    assert!(agree as f64 >= 0.9 * 301.0, "{agree} of 301 nodes agree");
    assert!(vi.sd.iter().chain(&exact.sd).all(|s| *s > 0.0));
}

#[test]
fn errors_are_reported_as_messages() {
    assert!(simulate_json("modes = ", 1.0, 0.1, 1.0, 0).is_err());
    assert!(simulate_json(MODEL, 1.0, 0.1, 0.0, 0).unwrap_err().contains("rate"));
    assert!(smooth_json(MODEL, "{\"times\": [0.5]}", 1.0, 0.1).unwrap_err().contains("observations"));
    let two_d = MODEL.replace("state_dim = 1", "state_dim = 2");
    assert!(exact_json(&two_d, "{\"times\": [], \"values\": []}", 1.0, 0.1, 100).is_err());
}
