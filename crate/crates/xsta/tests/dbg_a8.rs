use xsta::calibration;
use xsta::checkpoint;
use xsta::data;
use xsta::trainer;

#[test]
#[ignore]
fn dump_transfer() {
    let ckpt = checkpoint::load(std::path::Path::new("/tmp/a7s/hy1/run/best.ckpt")).unwrap();
    let cfg = ckpt.config.clone();
    let pairs = data::read_pairs_jsonl(std::path::Path::new("/tmp/a7s/hy1/eval.jsonl")).unwrap();
    let encoded: Vec<_> = pairs
        .iter()
        .map(|p| data::encode_pair(p, &ckpt.vocab, cfg.model.max_seq_len).unwrap())
        .collect();
    let batches = data::make_batches(&encoded, cfg.train.batch_size, 0, false);
    let start_of = |v: &[f64], i: usize| v[i * 2];
    let mut shown = 0;
    for batch in &batches {
        let (_b, fo) = trainer::forward_batch(&ckpt.store, &cfg, &ckpt.norm, batch, false, 0).unwrap();
        for (po, pair) in fo.pairs.iter().zip(&batch.pairs) {
            let Some(tr) = &po.p_t_given_s else { continue };
            let tr = tr.data();
            let pt = po.p_t.data();
            let cal = calibration::calibrate(&tr, &pt);
            let n = pair.tgt.seq_len();
            let gold = pair.tgt.label.start;
            let (c0, c1) = pair.tgt.context_range;
            let _ = n;
            // uncalibrated argmax start in context
            let am = (c0..c1).max_by(|&a, &b| start_of(&pt, a).partial_cmp(&start_of(&pt, b)).unwrap()).unwrap();
            let amc = (c0..c1).max_by(|&a, &b| start_of(&cal, a).partial_cmp(&start_of(&cal, b)).unwrap()).unwrap();
            if am != gold && shown < 8 {
                shown += 1;
                println!(
                    "id={} gold={} pt_am={} cal_am={} | pt[gold]={:.4} pt[am]={:.4} tr[gold]={:.4} tr[am]={:.4} tr_max={:.4} tr_min={:.4}",
                    pair.id, gold, am, amc,
                    start_of(&pt, gold), start_of(&pt, am),
                    start_of(&tr, gold), start_of(&tr, am),
                    (c0..c1).map(|i| start_of(&tr, i)).fold(f64::MIN, f64::max),
                    (c0..c1).map(|i| start_of(&tr, i)).fold(f64::MAX, f64::min),
                );
            }
        }
        if shown >= 8 {
            break;
        }
    }
    println!("shown {shown}");
}
