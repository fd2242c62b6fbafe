// scratch probe, not committed
use obverter_core::agent::ArchConfig;
use obverter_core::gradcheck::agent_composite_check;

fn main() {
    let arch = ArchConfig {
        resolution: 16, conv_filters: 4, conv_strides: vec![2, 2],
        embed_dim: 16, gru_hidden: 8, decision_hidden: 16,
        vocab_size: 3, max_len: 4, threshold: 0.95, bn_eps: 1e-5, bn_momentum: 0.9,
    };
    for eps in [2.5e-3f32, 1.25e-3, 6e-4, 3e-4, 1.5e-4] {
        let rep = agent_composite_check(&arch, 61, eps).unwrap();
        println!("composite eps {:.2e}: max {:.5} worst {:?}", eps, rep.max_rel_error, rep.worst);
    }
}
