//! Diagnostic: train one discriminator's classification head (with its trunk)
//! on real images only, no adversarial term, to measure how fast the critic
//! architecture can learn each attribute.
//!
//! Usage: cargo run --release -p modgan --example cls_probe <data_root> <attr> [lr] [steps] [width]

use modgan::graph::Graph;
use modgan::nets::{Discriminator, NetConfig};
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
    let attr = args[2].as_str();
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(400);
    let width: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);

    let schema = AttributeSchema::colormnist();
    let ai = schema.index_of(attr).unwrap();
    let c = schema.c(ai);
    let manifest = DatasetManifest::load(root, &schema).unwrap();
    let dataset = Dataset::load(&manifest, &schema, 64).unwrap();
    let cfg = NetConfig::new(64, width, 16);
    let d = Discriminator::new(cfg, c);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = d.init_params::<f32, _>(&mut rng);
    let mut opt = AdamState::default();

    for step in 0..steps {
        let batch = dataset.sample_batch(16, &mut rng);
        let g = &mut Graph::<f32>::new();
        let bind = params.bind(g, true);
        let x = g.constant(batch.images.clone());
        let out = d.forward(g, &bind, x).unwrap();
        let target = batch.one_hot(ai, c);
        let loss = objectives::cls_real(g, out.logits, &target);
        let lv = g.scalar(loss);
        if step % 20 == 0 || step + 1 == steps {
            println!("step {step:4} cls_{attr} {lv:.4}");
        }
        let grads = g.backward(loss);
        let mut gmap = BTreeMap::new();
        for (name, id) in bind.ids() {
            if let Some(gid) = grads.get(id) {
                gmap.insert(name.to_string(), g.value(gid).clone());
            }
        }
        opt.step(&mut params, &gmap, lr, 0.5, 0.999);
    }
}
