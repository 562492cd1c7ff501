use gcanet::model::{GcaNet, ModelConfig, Variant};

fn main() {
    let config = ModelConfig::default();
    for v in Variant::ALL {
        let (net, store) = GcaNet::build_variant::<f32>(&config, v, 1).unwrap();
        let s = net.summarize(256);
        println!(
            "{:<10} params(store)={:>9} params(census)={:>9} macs={:>13} ({:.3}G)",
            v.label(),
            store.total_values(),
            s.total_params,
            s.total_macs,
            s.total_macs as f64 / 1e9
        );
    }
}
