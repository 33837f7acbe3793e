//! EDF reading checked against files assembled byte by byte in `support`.

mod support;

use seqsleep::edf::{parse_edf, EdfError};
use support::{header, ramp_file, samples, Sig};

#[test]
fn ramp_over_one_second() {
    let f = parse_edf(&ramp_file()).unwrap();
    let ch = f.channels();
    assert_eq!(ch.len(), 1);
    assert_eq!(ch[0].name, "EEG Fpz-Cz");
    assert_eq!(ch[0].sample_rate_hz, 10.0);
    assert_eq!(ch[0].samples, (0..10).map(f64::from).collect::<Vec<_>>());
    assert!(!f.header.is_edf_plus());
}

#[test]
fn calibration_is_linear_in_the_header_ranges() {
    let sig = Sig {
        label: "EEG",
        pmin: "-100",
        pmax: "100",
        dmin: "-2048",
        dmax: "2047",
        spr: 4,
    };
    let mut f = header(&[sig], "2", "0.5", "");
    f.extend(samples(&[-2048, 2047, 0, -1, 100, 200, 300, 400]));
    let got = parse_edf(&f).unwrap().channels().remove(0);
    assert_eq!(got.sample_rate_hz, 8.0);
    let want: Vec<f64> = [-2048, 2047, 0, -1, 100, 200, 300, 400]
        .iter()
        .map(|&d| -100.0 + (d as f64 + 2048.0) * 200.0 / 4095.0)
        .collect();
    for (a, b) in got.samples.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(got.samples[0], -100.0);
    assert_eq!(got.samples[1], 100.0);
}

#[test]
fn degenerate_calibration_is_rejected() {
    let sig = Sig {
        label: "EEG",
        pmin: "5",
        pmax: "5",
        dmin: "-32768",
        dmax: "32767",
        spr: 2,
    };
    let mut f = header(&[sig], "1", "1", "");
    f.extend(samples(&[1, 2]));
    match parse_edf(&f) {
        Err(EdfError::Calibration { signal: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
    let sig = Sig {
        label: "EEG",
        pmin: "0",
        pmax: "1",
        dmin: "7",
        dmax: "7",
        spr: 2,
    };
    let mut f = header(&[sig], "1", "1", "");
    f.extend(samples(&[1, 2]));
    assert!(matches!(parse_edf(&f), Err(EdfError::Calibration { .. })));
}

#[test]
fn truncated_and_inconsistent_files() {
    let mut f = ramp_file();
    f.truncate(f.len() - 4);
    assert_eq!(
        parse_edf(&f),
        Err(EdfError::Truncated {
            expected: 1,
            found: 0
        })
    );

    let mut two = header(
        &[Sig {
            label: "EEG",
            pmin: "0",
            pmax: "1",
            dmin: "0",
            dmax: "1",
            spr: 3,
        }],
        "3",
        "1",
        "",
    );
    two.extend(samples(&[0; 6]));
    assert_eq!(
        parse_edf(&two),
        Err(EdfError::Truncated {
            expected: 3,
            found: 2
        })
    );

    let mut extra = ramp_file();
    extra.extend([0, 0]);
    assert!(matches!(
        parse_edf(&extra),
        Err(EdfError::RecordCount { .. })
    ));
}

#[test]
fn unknown_record_count_is_inferred() {
    let mut f = header(
        &[Sig {
            label: "EEG",
            pmin: "0",
            pmax: "65535",
            dmin: "-32768",
            dmax: "32767",
            spr: 2,
        }],
        "-1",
        "1",
        "",
    );
    f.extend(samples(&[-32768, -32767, -32766, -32765, -32764, -32763]));
    let file = parse_edf(&f).unwrap();
    assert_eq!(file.header.n_records, 3);
    assert_eq!(
        file.channels()[0].samples,
        vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    );
}

#[test]
fn malformed_fields_are_named() {
    let mut f = ramp_file();
    f[236..244].copy_from_slice(b"abc     ");
    let err = parse_edf(&f).unwrap_err();
    assert!(
        matches!(
            err,
            EdfError::Field {
                field: "number of data records",
                ..
            }
        ),
        "{err}"
    );
    assert!(err.to_string().contains("number of data records"));

    let mut f = ramp_file();
    // Samples-per-record column of signal 0: 256 + 16 + 80 + 8 * 5 + 80.
    f[472..480].copy_from_slice(b"ten     ");
    let err = parse_edf(&f).unwrap_err();
    assert!(
        matches!(
            err,
            EdfError::Field {
                field: "samples per record",
                signal: Some(0),
                ..
            }
        ),
        "{err}"
    );

    let mut f = ramp_file();
    f[184..192].copy_from_slice(b"999     ");
    assert!(matches!(
        parse_edf(&f),
        Err(EdfError::Field {
            field: "header bytes",
            ..
        })
    ));
    assert!(matches!(parse_edf(&f[..100]), Err(EdfError::Field { .. })));
}

#[test]
fn edf_plus_annotations_beside_a_signal() {
    let sigs = [
        Sig {
            label: "EEG",
            pmin: "-1",
            pmax: "1",
            dmin: "-1",
            dmax: "1",
            spr: 2,
        },
        Sig {
            label: "EDF Annotations",
            pmin: "-1",
            pmax: "1",
            dmin: "-32768",
            dmax: "32767",
            spr: 16,
        },
    ];
    let mut f = header(&sigs, "2", "30", "EDF+C");
    let tal = |t: &str| {
        let mut b = t.as_bytes().to_vec();
        b.resize(32, 0);
        b
    };
    f.extend(samples(&[-1, 1]));
    f.extend(tal("+0\x14\x14\0+0\x1530\x14Sleep stage W\x14\0"));
    f.extend(samples(&[0, 0]));
    f.extend(tal("+30\x14\x14\0+30\x1530\x14Sleep stage 4\x14\0"));
    let file = parse_edf(&f).unwrap();
    assert!(file.header.is_edf_plus());
    assert_eq!(file.channels().len(), 1);
    assert_eq!(file.channels()[0].samples, vec![-1.0, 1.0, 0.0, 0.0]);
    let texts: Vec<&str> = file.annotations.iter().map(|a| a.text.as_str()).collect();
    assert_eq!(texts, ["Sleep stage W", "Sleep stage 4"]);
    assert_eq!(file.annotations[1].onset_s, 30.0);
    assert_eq!(file.annotations[1].duration_s, Some(30.0));
}
