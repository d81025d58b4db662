//! Precision-recall curve and all-point average precision for a ranked list
//! of matches, then a full report for two images.

use foci::boxes::{BBox, Detection, GroundTruth};
use foci::eval::{average_precision, evaluate, pr_curve};

fn main() -> foci::Result<()> {
    let flags = [true, false, true, true, false];
    for p in pr_curve(&flags, 4) {
        println!("recall {:.2} precision {:.3}", p.recall, p.precision);
    }
    println!("AP {:?}", average_precision(&flags, 4));

    let b = |cx, cy| BBox::new(cx, cy, 0.1, 0.1);
    let gts = vec![
        vec![GroundTruth {
            bbox: b(0.2, 0.2),
            class_id: 0,
        }],
        vec![
            GroundTruth {
                bbox: b(0.5, 0.5),
                class_id: 0,
            },
            GroundTruth {
                bbox: b(0.8, 0.3),
                class_id: 0,
            },
        ],
    ];
    let d = |bbox, score, index| Detection {
        bbox,
        class_id: 0,
        score,
        index,
    };
    let dets = vec![
        vec![d(b(0.21, 0.2), 0.9, 1)],
        vec![d(b(0.5, 0.52), 0.8, 1), d(b(0.1, 0.9), 0.4, 2)],
    ];
    let report = evaluate(&dets, &gts, 1, 0.25, 0.25);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
