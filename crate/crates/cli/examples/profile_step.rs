//! Rough timing breakdown of one training step at default scale.
use std::time::Instant;

use clipmap_core::data::{batch_indices, make_batch, Split, SplitTable};
use clipmap_core::model::{encode_image_nodes, encode_text_nodes, ClipModel, EncoderNodes};
use clipmap_core::tape::Tape;
use clipmap_core::train::clip_task_loss_nodes;
use clipmap::config::RunConfig;

fn main() {
    clipmap::tune_allocator();
    let text = std::env::var("CM_CFG").unwrap_or_default();
    let cfg = RunConfig::parse(&text, None).unwrap();
    let model = ClipModel::<f64>::init(
        cfg.image_config().unwrap(),
        cfg.text_config().unwrap(),
        50.0,
        0,
    )
    .unwrap();
    let table = SplitTable::build(&cfg.data).unwrap();
    let idx = batch_indices(cfg.data.train_size, 64, 0, 0).unwrap().remove(0);
    let (img, txt) = make_batch::<f64>(&cfg.data, &table, Split::Train, &idx);

    let reps = 5;
    let (mut t_stage, mut t_fwd_img, mut t_fwd_txt, mut t_loss, mut t_bwd) =
        (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..reps {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let inodes = EncoderNodes::stage(&mut tape, &model.image.weights, true);
        let tnodes = EncoderNodes::stage(&mut tape, &model.text.weights, true);
        let ls = tape.leaf(model.log_logit_scale.clone(), true);
        let scale = tape.exp(ls);
        t_stage += t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let ie = encode_image_nodes(&mut tape, &model.image.config, &inodes, &img).unwrap();
        t_fwd_img += t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let te = encode_text_nodes(&mut tape, &model.text.config, &tnodes, &txt).unwrap();
        t_fwd_txt += t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        let (i2t, t2i) = clipmap_core::model::clip_logits_nodes(&mut tape, ie, te, scale).unwrap();
        let loss = clip_task_loss_nodes(&mut tape, i2t, t2i).unwrap();
        t_loss += t3.elapsed().as_secs_f64();

        let t4 = Instant::now();
        tape.backward(loss).unwrap();
        t_bwd += t4.elapsed().as_secs_f64();
    }
    let r = reps as f64;
    println!("stage   {:.3}s", t_stage / r);
    println!("fwd img {:.3}s", t_fwd_img / r);
    println!("fwd txt {:.3}s", t_fwd_txt / r);
    println!("loss    {:.3}s", t_loss / r);
    println!("bwd     {:.3}s", t_bwd / r);
}
