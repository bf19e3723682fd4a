use plat_core::attention::{plat_attention, softmax_attention, AttentionHeadConfig};
use plat_core::energy_flow::{euler_step, EnergyKernel, FlowConfig, FlowState, StepMode};
use plat_core::rng::{gaussian_matrix, seeded};
use rand::Rng;

#[test]
fn p2_plat_attention_equals_softmax_attention() {
    let mut rng = seeded(0xa11);
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let d = rng.random_range(1..=8);
        let d_qk = rng.random_range(1..=8);
        let q = gaussian_matrix(&mut rng, n, d_qk, 1.0);
        let k = gaussian_matrix(&mut rng, n, d_qk, 1.0);
        let v = gaussian_matrix(&mut rng, n, d, 1.0);
        let cfg = AttentionHeadConfig::new(d, d_qk, d, 2.0);
        let a = plat_attention(&q, &k, &v, &cfg).unwrap();
        let b = softmax_attention(&q, &k, &v).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}

#[test]
fn rowwise_euler_step_is_symmetric_attention() {
    let mut rng = seeded(0xa12);
    for _ in 0..50 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let keys = gaussian_matrix(&mut rng, n, 3, 0.8);
        let u = gaussian_matrix(&mut rng, n, d, 1.0);
        let kernel = EnergyKernel::symmetric_keys(&keys).unwrap();
        let state = FlowState::new(u.clone(), &kernel, 2.0).unwrap();
        let next = euler_step(&state, &kernel, &FlowConfig::new(2.0, StepMode::PaperRowwise)).unwrap();
        let attn = plat_attention(&keys, &keys, &u, &AttentionHeadConfig::new(d, 3, d, 2.0)).unwrap();
        assert!(next.u.max_abs_diff(&attn).unwrap() < 1e-10);
    }
}
