//! A minimal EDF writer assembled field by field, independent of the
//! crate's own writer.
#![allow(dead_code)]

pub struct Sig {
    pub label: &'static str,
    pub pmin: &'static str,
    pub pmax: &'static str,
    pub dmin: &'static str,
    pub dmax: &'static str,
    pub spr: usize,
}

fn pad(s: &str, n: usize) -> String {
    format!("{s:<n$}")
}

/// Header text for `records` records of `duration` seconds.
pub fn header(sigs: &[Sig], records: &str, duration: &str, reserved: &str) -> Vec<u8> {
    let ns = sigs.len();
    let mut h = String::new();
    h += &pad("0", 8);
    h += &pad("patient", 80);
    h += &pad("recording", 80);
    h += "01.02.03";
    h += "04.05.06";
    h += &pad(&(256 * (ns + 1)).to_string(), 8);
    h += &pad(reserved, 44);
    h += &pad(records, 8);
    h += &pad(duration, 8);
    h += &pad(&ns.to_string(), 4);
    type Column<'a> = (usize, &'a dyn Fn(&Sig) -> String);
    let cols: [Column; 10] = [
        (16, &|s| s.label.into()),
        (80, &|_| String::new()),
        (8, &|_| "uV".into()),
        (8, &|s| s.pmin.into()),
        (8, &|s| s.pmax.into()),
        (8, &|s| s.dmin.into()),
        (8, &|s| s.dmax.into()),
        (80, &|_| String::new()),
        (8, &|s| s.spr.to_string()),
        (32, &|_| String::new()),
    ];
    for (w, f) in cols {
        for s in sigs {
            h += &pad(&f(s), w);
        }
    }
    assert_eq!(h.len(), 256 * (ns + 1));
    h.into_bytes()
}

pub fn samples(values: &[i16]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn ramp_file() -> Vec<u8> {
    // Digital 0..9 maps onto physical 0..9 with these ranges.
    let sig = Sig {
        label: "EEG Fpz-Cz",
        pmin: "-32768",
        pmax: "32767",
        dmin: "-32768",
        dmax: "32767",
        spr: 10,
    };
    let mut f = header(&[sig], "1", "1", "");
    f.extend(samples(&(0..10).collect::<Vec<i16>>()));
    f
}
