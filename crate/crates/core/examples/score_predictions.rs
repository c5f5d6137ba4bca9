//! Scores hand-written predictions with the mask and text metrics.

use r2seg::evalkit::*;

fn record(id: &str, pred: &[usize], gt: &[usize], pred_text: &str, gt_text: &str) -> EvalRecord {
    EvalRecord {
        sample_id: id.into(),
        pred_points: vec![pred.to_vec()],
        gt_points: vec![gt.to_vec()],
        pred_text: pred_text.into(),
        gt_texts: vec![gt_text.into()],
    }
}

fn main() {
    let gt: Vec<usize> = (0..100).collect();
    let records = vec![
        record("s0", &(0..90).collect::<Vec<_>>(), &gt, "the brown chair near the desk", "the brown chair near the desk"),
        record("s1", &(40..120).collect::<Vec<_>>(), &gt, "the chair", "the brown chair"),
        record("s2", &(95..200).collect::<Vec<_>>(), &gt, "the red lamp", "the white lamp"),
        record("s3", &[], &gt, "a table", "the tv"),
    ];
    for r in &records {
        println!(
            "{}  IoU {:.3}  BLEU-4 {:.3}  ROUGE-L {:.3}",
            r.sample_id,
            r.iou(),
            bleu4(&r.pred_text, &r.gt_texts),
            rouge_l(&r.pred_text, &r.gt_texts)
        );
    }
    let m = compute_metrics(&records);
    println!("\n{}", serde_json::to_string_pretty(&m).unwrap());
}
