//! Diagnostic: train encoder + reconstructor on the identity reconstruction
//! loss alone, to separate optimization issues from adversarial interference.
//!
//! Usage: cargo run --release -p modgan --example recon_probe <data_root> [lr] [steps] [width]

use modgan::graph::Graph;
use modgan::nets::{Encoder, NetConfig, Reconstructor};
use modgan::objectives;
use modgan::schema_data::{AttributeSchema, DatasetManifest};
use modgan::trainer::{AdamState, Dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = Path::new(&args[1]);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
    let width: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);

    let schema = AttributeSchema::colormnist();
    let manifest = DatasetManifest::load(root, &schema).unwrap();
    let dataset = Dataset::load(&manifest, &schema, 64).unwrap();
    let cfg = NetConfig::new(64, width, 16);
    let enc = Encoder::new(cfg);
    let rec = Reconstructor::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut enc_p = enc.init_params::<f32, _>(&mut rng);
    let mut rec_p = rec.init_params::<f32, _>(&mut rng);
    let mut opt_e = AdamState::default();
    let mut opt_r = AdamState::default();

    for step in 0..steps {
        let batch = dataset.sample_batch(16, &mut rng);
        let g = &mut Graph::<f32>::new();
        let be = enc_p.bind(g, true);
        let br = rec_p.bind(g, true);
        let x = g.constant(batch.images.clone());
        let f = enc.forward(g, &be, x).unwrap();
        let x_rec = rec.forward(g, &br, f);
        let loss = objectives::cyclic_er(g, x, x_rec);
        let lv = g.scalar(loss);
        if step % 20 == 0 || step + 1 == steps {
            println!("step {step:4} cyc_er {lv:.4}");
        }
        let grads = g.backward(loss);
        for (params, bind, opt) in
            [(&mut enc_p, &be, &mut opt_e), (&mut rec_p, &br, &mut opt_r)]
        {
            let mut gmap = BTreeMap::new();
            for (name, id) in bind.ids() {
                if let Some(gid) = grads.get(id) {
                    gmap.insert(name.to_string(), g.value(gid).clone());
                }
            }
            opt.step(params, &gmap, lr, 0.5, 0.999);
        }
    }
}
