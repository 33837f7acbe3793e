//! Proptest generators shared by the property tests and the acceptance run.

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use seqsleep_core::inference::Posterior;
use seqsleep_core::recordings::*;
use seqsleep_core::Error;

const RK_TOKENS: &[&str] = &[
    "W",
    "1",
    "2",
    "3",
    "4",
    "R",
    "S2",
    "MOVEMENT",
    "?",
    "Sleep stage 3",
];
const AASM_TOKENS: &[&str] = &[
    "W", "N1", "N2", "N3", "R", "REM", "MT", "UNKNOWN", "Stage N2",
];

pub fn standard_and_tokens(max: usize) -> impl Strategy<Value = (ScoringStandard, Vec<String>)> {
    prop_oneof![Just(ScoringStandard::Rk), Just(ScoringStandard::Aasm)].prop_flat_map(move |std| {
        let pool = if std == ScoringStandard::Rk {
            RK_TOKENS
        } else {
            AASM_TOKENS
        };
        let tok = proptest::sample::select(pool).prop_map(String::from);
        (Just(std), proptest::collection::vec(tok, 1..max))
    })
}

pub fn is_excluded(t: &str) -> bool {
    ["MOVEMENT", "?", "MT", "UNKNOWN"].contains(&t)
}

/// Independent count of the epochs a canonical recording must keep.
pub fn expected_epochs(
    tokens: &[String],
    epoch_len: f64,
    len100: usize,
    lights: (Option<usize>, Option<usize>),
) -> Vec<usize> {
    let (lo, hi) = (lights.0.unwrap_or(0), lights.1.unwrap_or(usize::MAX));
    (0..tokens.len())
        .filter(|&k| k >= lo && k < hi && !is_excluded(&tokens[k]))
        .filter(|&k| {
            let start_s = k as f64 * epoch_len - (30.0 - epoch_len) / 2.0;
            start_s >= 0.0 && ((start_s + 30.0) * 100.0).round() as usize <= len100
        })
        .collect()
}

pub fn canonical_case() -> impl Strategy<Value = CanonicalCase> {
    (
        standard_and_tokens(6),
        proptest::sample::select(vec![50.0, 100.0, 128.0, 200.0, 250.0, 256.0]),
        prop_oneof![Just(20.0), Just(30.0)],
        0usize..4000,
        (
            proptest::option::of(0usize..3),
            proptest::option::of(2usize..7),
        ),
    )
        .prop_map(|((s, t), rate, e, extra, lights)| (s, t, rate, e, extra, lights))
}

pub type CanonicalCase = (
    ScoringStandard,
    Vec<String>,
    f64,
    f64,
    usize,
    (Option<usize>, Option<usize>),
);

/// Canonicalizes a random raw recording and checks the kept epochs and
/// every channel length against [`expected_epochs`].
pub fn check_canonical_case(
    (standard, tokens, rate, epoch_len, extra, lights): CanonicalCase,
) -> Result<(), TestCaseError> {
    let n_raw = ((tokens.len() as f64 * epoch_len - 10.0) * rate) as usize + extra;
    let samples: Vec<f64> = (0..n_raw)
        .map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5)
        .collect();
    let ch = Channel::new("EEG", rate, samples);
    let ch2 = Channel::new("EOG", rate, vec![0.25; n_raw]);
    let lights = match lights {
        (Some(a), Some(b)) if a > b => (Some(b), Some(a)),
        l => l,
    };
    let hyp = Hypnogram {
        tokens: tokens.clone(),
        standard,
        epoch_len_s: epoch_len,
        lights_off_epoch: lights.0,
        lights_on_epoch: lights.1,
    };
    let len100 = (n_raw as f64 * 100.0 / rate).ceil() as usize;
    let want = expected_epochs(&tokens, epoch_len, len100, lights);
    match canonicalize("r", "s", &[ch, ch2], &hyp) {
        Ok(rec) => {
            prop_assert_eq!(&rec.epoch_index, &want);
            prop_assert_eq!(rec.labels.len(), rec.n_epochs());
            for c in &rec.channels {
                prop_assert_eq!(c.sample_rate_hz, 100.0);
                prop_assert_eq!(c.samples.len(), rec.n_epochs() * 3000);
            }
            prop_assert!(rec.n_epochs() > 0);
        }
        Err(Error::Empty(_)) => prop_assert!(want.is_empty()),
        Err(e) => prop_assert!(false, "unexpected error {e}"),
    }
    Ok(())
}

pub fn posterior() -> impl Strategy<Value = Posterior> {
    proptest::array::uniform5(0.001f64..1.0).prop_map(|mut p| {
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    })
}
