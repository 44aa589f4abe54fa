//! Plugs a hand-written stage extractor into the model through the adapter.
//! A port of a large pretrained network would be wrapped the same way, with
//! its weights loaded into the parameter store first.
//!
//! `cargo run --release --example custom_backbone_adapter`

use std::sync::Arc;

use herbs::backbone::{AdapterBackbone, BackboneHandle, ImageBatch};
use herbs::net::{HerbsConfig, HerbsNet};
use herbs::nn::{Conv2d, ParamBuilder};
use herbs_tensor::{ChaCha8Rng, ParamStore, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> herbs::Result<()> {
    let channels = vec![8, 16, 32, 32];
    let strides = vec![2, 4, 8, 16];
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let mut convs = Vec::new();
    let mut prev = 3;
    for (i, &c) in channels.iter().enumerate() {
        convs.push(Conv2d::new(&mut b.scope(&format!("adapter.stage{i}")), "conv", prev, c, 3, 2, 1, true));
        prev = c;
    }
    let blocks = convs.iter().map(|c| c.params()).collect();
    let stages = convs.clone();
    let adapter = AdapterBackbone::new(
        "strided-convs",
        channels,
        strides,
        blocks,
        Box::new(move |sess, pixels| {
            let mut x = pixels;
            let mut out = Vec::new();
            for conv in &stages {
                x = conv.forward(sess, x).relu();
                out.push(x);
            }
            Ok(out)
        }),
    )?;

    let net = HerbsNet::with_backbone(HerbsConfig::tiny(4), BackboneHandle::new(Arc::new(adapter), store))?;
    println!("{} parameters, {} heads", net.num_parameters(), net.num_heads());
    for (module, ids) in net.module_params() {
        println!("  {module:<16} {} tensors", ids.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pixels = Tensor::from_fn([2, 3, 32, 32], |_| rng.gen_range(-1.0..1.0));
    let batch = ImageBatch::new(pixels, vec!["p".into(), "q".into()], Some(vec![0, 3]))?;
    let (bundle, losses) = net.forward(&batch, 0)?;
    println!("fused {:?}", bundle.fused.row(0));
    println!("loss {:.5} (bs {:.5}, refinement {:.5})", losses.loss_herbs, losses.loss_bs, losses.loss_r);
    Ok(())
}
