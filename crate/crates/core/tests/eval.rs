mod common;

use std::sync::Mutex;

use common::oracle::oracle_logits;
use common::toy_weights;
use nasprune::data::WindowSet;
use nasprune::eval::{eval_loss, measure_latency, perplexity};
use nasprune::model::extract_subnet;
use nasprune::search::SubNetworkConfig;
use nasprune::Error;

static EXCLUSIVE: Mutex<()> = Mutex::new(());

#[test]
fn perplexity_matches_direct_summation() {
    let _g = EXCLUSIVE.lock().unwrap();
    let w = toy_weights::<f64>(0);
    let text: Vec<u8> = b"Let there be light: and there was light. ".repeat(4);
    let set = WindowSet::new(&text, 12).unwrap();
    for theta in [SubNetworkConfig::full(&w.cfg), SubNetworkConfig::new(32, 2, 8, 1.0, 1)] {
        let mut nll = 0.0;
        let mut n = 0;
        for win in &set.windows {
            let logits = oracle_logits(&w, &theta, &win[..12]);
            for (t, row) in logits.iter().enumerate() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
                nll += lse - row[win[t + 1] as usize];
                n += 1;
            }
        }
        let want = (nll / n as f64).exp();
        let got = perplexity(&w, &theta, &set, 3).unwrap();
        assert!((got - want).abs() < 1e-9 * want, "{theta}: {got} vs {want}");
        assert!((eval_loss(&w, &theta, &set, 1).unwrap() - got.ln()).abs() < 1e-12);
    }
    let empty = WindowSet {
        seq: 12,
        windows: vec![],
    };
    assert!(matches!(perplexity(&w, &SubNetworkConfig::full(&w.cfg), &empty, 2), Err(Error::Input(_))));
}

#[test]
fn latency_is_stable_and_grows_with_depth() {
    let _g = EXCLUSIVE.lock().unwrap();
    let w = toy_weights::<f32>(1);
    let shallow = extract_subnet(&w, &SubNetworkConfig::new(64, 4, 16, 3.5, 2)).unwrap();
    let deep = extract_subnet(&w, &SubNetworkConfig::new(64, 4, 16, 3.5, 4)).unwrap();
    let a = measure_latency(&deep, 64, 25, 5).unwrap();
    let b = measure_latency(&deep, 64, 25, 5).unwrap();
    let ratio = a.median_ms / b.median_ms;
    assert!((0.8..1.25).contains(&ratio), "{a:?} vs {b:?}");
    assert!(a.p10_ms <= a.median_ms && a.median_ms <= a.p90_ms);
    let s = measure_latency(&shallow, 64, 25, 5).unwrap();
    assert!(s.median_ms < a.median_ms.min(b.median_ms), "{s:?} vs {a:?}");
    assert!(measure_latency(&deep, 8, 3, 1).is_ok());
    assert!(measure_latency(&deep, 8, 2, 1).is_err());
}
