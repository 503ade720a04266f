//! Digraph timing features, key-pair adjacency classes, the 5-class x
//! 4-feature template, and the Euclidean distance between templates.
//!
//! For each pair of successive keystrokes (ordered by press time) the four
//! features are the hold time of the first key (PR), the press-to-press
//! interval (PP), the release-to-release interval (RR, kept signed), and the
//! absolute release-to-press interval (|RP|; the signed value is negative
//! under rollover typing). Digraphs are grouped into five adjacency classes
//! and averaged per class, giving a 20-value template.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::trace::Keystroke;

pub const NUM_CLASSES: usize = 5;
pub const NUM_FEATURES: usize = 4;
pub const TEMPLATE_DIMS: usize = NUM_CLASSES * NUM_FEATURES;

pub const TEMPLATE_CSV_HEADER: &str = "user_id,sample_id,class,pr_ms,pp_ms,rr_ms,rp_ms,count";

/// Timing features of one key pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DigraphFeatures {
    pub key_a: u32,
    pub key_b: u32,
    /// Hold time of `key_a`, microseconds.
    pub pr_us: i64,
    /// Press-to-press interval, microseconds.
    pub pp_us: i64,
    /// Release-to-release interval, microseconds; negative under extreme rollover.
    pub rr_us: i64,
    /// Absolute release-to-press interval, microseconds.
    pub rp_abs_us: i64,
    pub adjacency_class: u8,
}

/// Per-class mean feature matrix in milliseconds. Rows are adjacency
/// classes 1..=5, columns are PR, PP, RR, |RP|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub user_id: u32,
    pub sample_id: u32,
    pub values: [[f64; NUM_FEATURES]; NUM_CLASSES],
    pub counts: [usize; NUM_CLASSES],
}

impl Template {
    /// The template as the flat 20-vector used for distances, row-major.
    pub fn flatten(&self) -> [f64; TEMPLATE_DIMS] {
        let mut out = [0.0; TEMPLATE_DIMS];
        for (c, row) in self.values.iter().enumerate() {
            out[c * NUM_FEATURES..(c + 1) * NUM_FEATURES].copy_from_slice(row);
        }
        out
    }
}

/// Physical key positions on a QWERTY grid. Codes without a position
/// (space, enter, modifiers, arrows) are off-grid.
#[derive(Debug, Clone)]
pub struct KeyboardMap {
    coords: HashMap<u32, (i32, i32)>,
}

// Rows of the main key block. Each entry is (unshifted, shifted) for the
// same physical key; letters get both cases.
const QWERTY_ROWS: [&[(char, char)]; 4] = [
    &[
        ('`', '~'),
        ('1', '!'),
        ('2', '@'),
        ('3', '#'),
        ('4', '$'),
        ('5', '%'),
        ('6', '^'),
        ('7', '&'),
        ('8', '*'),
        ('9', '('),
        ('0', ')'),
        ('-', '_'),
        ('=', '+'),
    ],
    &[
        ('q', 'Q'),
        ('w', 'W'),
        ('e', 'E'),
        ('r', 'R'),
        ('t', 'T'),
        ('y', 'Y'),
        ('u', 'U'),
        ('i', 'I'),
        ('o', 'O'),
        ('p', 'P'),
        ('[', '{'),
        (']', '}'),
        ('\\', '|'),
    ],
    &[
        ('a', 'A'),
        ('s', 'S'),
        ('d', 'D'),
        ('f', 'F'),
        ('g', 'G'),
        ('h', 'H'),
        ('j', 'J'),
        ('k', 'K'),
        ('l', 'L'),
        (';', ':'),
        ('\'', '"'),
    ],
    &[
        ('z', 'Z'),
        ('x', 'X'),
        ('c', 'C'),
        ('v', 'V'),
        ('b', 'B'),
        ('n', 'N'),
        ('m', 'M'),
        (',', '<'),
        ('.', '>'),
        ('/', '?'),
    ],
];

impl KeyboardMap {
    pub fn qwerty() -> Self {
        let mut coords = HashMap::new();
        for (row, keys) in QWERTY_ROWS.iter().enumerate() {
            for (col, &(lo, hi)) in keys.iter().enumerate() {
                coords.insert(lo as u32, (row as i32, col as i32));
                coords.insert(hi as u32, (row as i32, col as i32));
            }
        }
        Self { coords }
    }

    pub fn coord(&self, key_code: u32) -> Option<(i32, i32)> {
        self.coords.get(&key_code).copied()
    }
}

/// Upper Chebyshev-distance bound of adjacency classes 2, 3 and 4; greater
/// distances (and off-grid keys) fall into class 5. Swappable for other
/// adjacency schemes.
pub const DEFAULT_CLASS_BOUNDS: [i32; 3] = [1, 2, 4];

/// Classify a key pair by physical proximity: class 1 for the same key,
/// classes 2..=4 by Chebyshev grid distance against `bounds`, class 5
/// beyond the last bound or when either key is off-grid. Symmetric in its
/// key arguments.
pub fn adjacency_class_with_bounds(
    map: &KeyboardMap,
    bounds: &[i32; 3],
    key_a: u32,
    key_b: u32,
) -> u8 {
    if key_a == key_b {
        return 1;
    }
    let (a, b) = match (map.coord(key_a), map.coord(key_b)) {
        (Some(a), Some(b)) => (a, b),
        _ => return 5,
    };
    let d = (a.0 - b.0).abs().max((a.1 - b.1).abs());
    if d == 0 {
        return 1; // distinct codes on the same physical key, e.g. 'a' and 'A'
    }
    for (i, &bound) in bounds.iter().enumerate() {
        if d <= bound {
            return i as u8 + 2;
        }
    }
    5
}

/// [`adjacency_class_with_bounds`] with the default class boundaries:
/// class 2 for d = 1, class 3 for d = 2, class 4 for d in 3..=4.
pub fn adjacency_class(map: &KeyboardMap, key_a: u32, key_b: u32) -> u8 {
    adjacency_class_with_bounds(map, &DEFAULT_CLASS_BOUNDS, key_a, key_b)
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("need at least two keystrokes")]
    NeedTwoKeystrokes,
    #[error("cannot build a template from an empty feature list")]
    EmptyFeatures,
    #[error("template csv: {0}")]
    TemplateCsv(String),
}

/// Compute the four timing features for each adjacent pair of keystrokes.
/// Returns exactly `sample.len() - 1` records.
pub fn extract_digraph_features(
    sample: &[Keystroke],
    map: &KeyboardMap,
) -> Result<Vec<DigraphFeatures>, FeatureError> {
    if sample.len() < 2 {
        return Err(FeatureError::NeedTwoKeystrokes);
    }
    Ok(sample
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let pr = a.release_us as i64 - a.press_us as i64;
            let pp = b.press_us as i64 - a.press_us as i64;
            let rr = b.release_us as i64 - a.release_us as i64;
            let rp = b.press_us as i64 - a.release_us as i64;
            DigraphFeatures {
                key_a: a.key_code,
                key_b: b.key_code,
                pr_us: pr,
                pp_us: pp,
                rr_us: rr,
                rp_abs_us: rp.abs(),
                adjacency_class: adjacency_class(map, a.key_code, b.key_code),
            }
        })
        .collect())
}

fn feature_columns(d: &DigraphFeatures) -> [i64; NUM_FEATURES] {
    [d.pr_us, d.pp_us, d.rr_us, d.rp_abs_us]
}

/// Average each feature per adjacency class, in milliseconds. Classes with
/// no digraphs are imputed with the mean of that feature over all digraphs,
/// keeping the template 20-dimensional without injecting zeros.
pub fn build_template(
    features: &[DigraphFeatures],
    user_id: u32,
    sample_id: u32,
) -> Result<Template, FeatureError> {
    if features.is_empty() {
        return Err(FeatureError::EmptyFeatures);
    }
    let mut sums = [[0i64; NUM_FEATURES]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    let mut totals = [0i64; NUM_FEATURES];
    for d in features {
        let class = d.adjacency_class as usize - 1;
        counts[class] += 1;
        for (col, v) in feature_columns(d).into_iter().enumerate() {
            sums[class][col] += v;
            totals[col] += v;
        }
    }
    let overall: [f64; NUM_FEATURES] =
        std::array::from_fn(|col| totals[col] as f64 / features.len() as f64 / 1_000.0);
    let mut values = [[0.0; NUM_FEATURES]; NUM_CLASSES];
    for class in 0..NUM_CLASSES {
        for col in 0..NUM_FEATURES {
            values[class][col] = if counts[class] == 0 {
                overall[col]
            } else {
                sums[class][col] as f64 / counts[class] as f64 / 1_000.0
            };
        }
    }
    Ok(Template {
        user_id,
        sample_id,
        values,
        counts,
    })
}

/// Euclidean distance between two templates across all 20 dimensions.
pub fn euclidean_distance(t1: &Template, t2: &Template) -> f64 {
    vector_distance(&t1.flatten(), &t2.flatten())
}

pub fn vector_distance(a: &[f64; TEMPLATE_DIMS], b: &[f64; TEMPLATE_DIMS]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Serialize templates to CSV, five rows per template, values in
/// milliseconds with six decimal places.
pub fn write_templates_csv(templates: &[Template]) -> String {
    let mut out = String::from(TEMPLATE_CSV_HEADER);
    out.push('\n');
    for t in templates {
        for class in 0..NUM_CLASSES {
            let v = t.values[class];
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                t.user_id,
                t.sample_id,
                class + 1,
                v[0],
                v[1],
                v[2],
                v[3],
                t.counts[class]
            ));
        }
    }
    out
}

pub fn write_template_csv(template: &Template) -> String {
    write_templates_csv(std::slice::from_ref(template))
}

/// Parse a template CSV holding one or more templates. Each template must
/// contribute exactly five rows with classes 1..=5 in order.
pub fn parse_templates_csv(text: &str) -> Result<Vec<Template>, FeatureError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == TEMPLATE_CSV_HEADER => {}
        _ => {
            return Err(FeatureError::TemplateCsv(format!(
                "expected header {TEMPLATE_CSV_HEADER:?}"
            )))
        }
    }
    let mut templates: Vec<Template> = Vec::new();
    let mut row_in_template = 0usize;
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 8 {
            return Err(FeatureError::TemplateCsv(format!(
                "expected 8 fields on line {line}, found {}",
                fields.len()
            )));
        }
        let parse_u32 = |s: &str, what: &str| -> Result<u32, FeatureError> {
            s.parse()
                .map_err(|_| FeatureError::TemplateCsv(format!("bad {what} on line {line}: {s:?}")))
        };
        let parse_f64 = |s: &str, what: &str| -> Result<f64, FeatureError> {
            s.parse()
                .map_err(|_| FeatureError::TemplateCsv(format!("bad {what} on line {line}: {s:?}")))
        };
        let user_id = parse_u32(fields[0], "user_id")?;
        let sample_id = parse_u32(fields[1], "sample_id")?;
        let class = parse_u32(fields[2], "class")? as usize;
        if class != row_in_template + 1 {
            return Err(FeatureError::TemplateCsv(format!(
                "expected class {} on line {line}, found {class}",
                row_in_template + 1
            )));
        }
        if row_in_template == 0 {
            templates.push(Template {
                user_id,
                sample_id,
                values: [[0.0; NUM_FEATURES]; NUM_CLASSES],
                counts: [0; NUM_CLASSES],
            });
        }
        let t = templates.last_mut().expect("pushed above");
        if t.user_id != user_id || t.sample_id != sample_id {
            return Err(FeatureError::TemplateCsv(format!(
                "template identity changed mid-block on line {line}"
            )));
        }
        t.values[class - 1] = [
            parse_f64(fields[3], "pr_ms")?,
            parse_f64(fields[4], "pp_ms")?,
            parse_f64(fields[5], "rr_ms")?,
            parse_f64(fields[6], "rp_ms")?,
        ];
        t.counts[class - 1] = parse_u32(fields[7], "count")? as usize;
        row_in_template = (row_in_template + 1) % NUM_CLASSES;
    }
    if row_in_template != 0 {
        return Err(FeatureError::TemplateCsv(
            "file ends mid-template: row count is not a multiple of 5".into(),
        ));
    }
    if templates.is_empty() {
        return Err(FeatureError::TemplateCsv("no template rows".into()));
    }
    Ok(templates)
}

/// Parse a CSV holding exactly one template.
pub fn parse_template_csv(text: &str) -> Result<Template, FeatureError> {
    let templates = parse_templates_csv(text)?;
    if templates.len() != 1 {
        return Err(FeatureError::TemplateCsv(format!(
            "expected exactly one template (5 rows), found {}",
            templates.len()
        )));
    }
    Ok(templates.into_iter().next().expect("checked length"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks(code: u32, press_us: u64, release_us: u64) -> Keystroke {
        Keystroke {
            key_code: code,
            press_us,
            release_us,
        }
    }

    #[test]
    fn adjacency_examples() {
        let map = KeyboardMap::qwerty();
        assert_eq!(adjacency_class(&map, 'A' as u32, 'A' as u32), 1);
        assert_eq!(adjacency_class(&map, 'A' as u32, 'S' as u32), 2);
        assert_eq!(adjacency_class(&map, 'A' as u32, 13), 5); // enter is off-grid
        assert_eq!(adjacency_class(&map, 'A' as u32, 'a' as u32), 1); // same physical key
        assert_eq!(adjacency_class(&map, '1' as u32, '!' as u32), 1);
        assert_eq!(adjacency_class(&map, 'A' as u32, 'D' as u32), 3);
        assert_eq!(adjacency_class(&map, 'A' as u32, 'G' as u32), 4);
        assert_eq!(adjacency_class(&map, 'A' as u32, 'L' as u32), 5);
        assert_eq!(adjacency_class(&map, ' ' as u32, ' ' as u32), 1);
        assert_eq!(adjacency_class(&map, 'Q' as u32, ' ' as u32), 5);
    }

    #[test]
    fn adjacency_symmetric_and_total() {
        let map = KeyboardMap::qwerty();
        let codes: Vec<u32> = (0u32..128).chain([200, 65535]).collect();
        for &a in &codes {
            for &b in &codes {
                let c = adjacency_class(&map, a, b);
                assert!((1..=5).contains(&c));
                assert_eq!(c, adjacency_class(&map, b, a));
            }
        }
    }

    #[test]
    fn extract_direct_formula_evaluation() {
        let map = KeyboardMap::qwerty();
        let sample = [ks(65, 0, 80_000), ks(66, 120_000, 210_000)];
        let d = extract_digraph_features(&sample, &map).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].pr_us, 80_000);
        assert_eq!(d[0].pp_us, 120_000);
        assert_eq!(d[0].rr_us, 130_000);
        assert_eq!(d[0].rp_abs_us, 40_000);
    }

    #[test]
    fn extract_negative_rp_takes_absolute_value() {
        let map = KeyboardMap::qwerty();
        let sample = [ks(65, 0, 70_000), ks(66, 50_000, 120_000)];
        let d = extract_digraph_features(&sample, &map).unwrap();
        assert_eq!(d[0].pr_us, 70_000);
        assert_eq!(d[0].pp_us, 50_000);
        assert_eq!(d[0].rr_us, 50_000);
        assert_eq!(d[0].rp_abs_us, 20_000); // signed rp = 50 - 70 = -20 ms
    }

    #[test]
    fn extract_needs_two_keystrokes() {
        let map = KeyboardMap::qwerty();
        assert!(matches!(
            extract_digraph_features(&[ks(65, 0, 1)], &map),
            Err(FeatureError::NeedTwoKeystrokes)
        ));
    }

    #[test]
    fn digraph_count_is_n_minus_one() {
        let map = KeyboardMap::qwerty();
        let sample: Vec<Keystroke> = (0..122)
            .map(|i| ks(65 + (i % 26) as u32, i * 150_000, i * 150_000 + 80_000))
            .collect();
        assert_eq!(extract_digraph_features(&sample, &map).unwrap().len(), 121);
    }

    #[test]
    fn algebraic_identities_hold_exactly() {
        let map = KeyboardMap::qwerty();
        let mut sample = Vec::new();
        let mut press = 0u64;
        for i in 0..50u64 {
            let hold = 40_000 + (i * 7919) % 90_000;
            sample.push(ks(65 + (i % 26) as u32, press, press + hold));
            press += 30_000 + (i * 104_729) % 200_000;
        }
        let ds = extract_digraph_features(&sample, &map).unwrap();
        for (i, d) in ds.iter().enumerate() {
            let (a, b) = (&sample[i], &sample[i + 1]);
            let rp_signed = b.press_us as i64 - a.release_us as i64;
            let pr_next = b.release_us as i64 - b.press_us as i64;
            assert_eq!(d.pp_us, d.pr_us + rp_signed);
            assert_eq!(d.rr_us, d.pp_us + pr_next - d.pr_us);
        }
    }

    #[test]
    fn template_imputes_empty_classes_with_overall_mean() {
        let map = KeyboardMap::qwerty();
        // A->S twice, both class 2, PR 80 then 100 ms.
        let sample = [
            ks('A' as u32, 0, 80_000),
            ks('S' as u32, 150_000, 250_000),
            ks('A' as u32, 300_000, 400_000),
        ];
        let ds = extract_digraph_features(&sample, &map).unwrap();
        assert!(ds.iter().all(|d| d.adjacency_class == 2));
        let t = build_template(&ds, 1, 1).unwrap();
        assert!((t.values[1][0] - 90.0).abs() < 1e-12);
        for class in [0usize, 2, 3, 4] {
            assert!((t.values[class][0] - 90.0).abs() < 1e-12);
            assert_eq!(t.counts[class], 0);
        }
        assert_eq!(t.counts[1], 2);
        assert_eq!(t.counts.iter().sum::<usize>(), ds.len());
    }

    #[test]
    fn single_digraph_template_equals_its_features() {
        let map = KeyboardMap::qwerty();
        let sample = [ks(65, 0, 80_000), ks(66, 120_000, 210_000)];
        let ds = extract_digraph_features(&sample, &map).unwrap();
        let t = build_template(&ds, 1, 1).unwrap();
        for class in 0..NUM_CLASSES {
            assert_eq!(t.values[class], [80.0, 120.0, 130.0, 40.0]);
        }
    }

    #[test]
    fn distance_examples() {
        let map = KeyboardMap::qwerty();
        let sample = [ks(65, 0, 80_000), ks(66, 120_000, 210_000)];
        let ds = extract_digraph_features(&sample, &map).unwrap();
        let t1 = build_template(&ds, 1, 1).unwrap();
        assert_eq!(euclidean_distance(&t1, &t1), 0.0);

        let mut t2 = t1.clone();
        t2.values[0][0] += 3.0;
        assert!((euclidean_distance(&t1, &t2) - 3.0).abs() < 1e-12);

        let mut t3 = t1.clone();
        for row in t3.values.iter_mut() {
            for v in row.iter_mut() {
                *v += 1.0;
            }
        }
        assert!((euclidean_distance(&t1, &t3) - 20f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn time_shift_leaves_features_and_template_unchanged() {
        let map = KeyboardMap::qwerty();
        let base: Vec<Keystroke> = (0..30)
            .map(|i| ks(65 + (i % 26) as u32, i * 137_000, i * 137_000 + 64_000))
            .collect();
        let t_base = build_template(&extract_digraph_features(&base, &map).unwrap(), 1, 1).unwrap();
        for delta in [1u64, 1_000_000, 3_600_000_000] {
            let shifted: Vec<Keystroke> = base
                .iter()
                .map(|k| ks(k.key_code, k.press_us + delta, k.release_us + delta))
                .collect();
            let t_shifted =
                build_template(&extract_digraph_features(&shifted, &map).unwrap(), 1, 1).unwrap();
            assert_eq!(t_base.values, t_shifted.values);
            assert_eq!(euclidean_distance(&t_base, &t_shifted), 0.0);
        }
    }

    #[test]
    fn template_csv_round_trip_and_header() {
        let map = KeyboardMap::qwerty();
        let sample = [
            ks('A' as u32, 0, 80_000),
            ks('S' as u32, 150_000, 250_000),
            ks('L' as u32, 280_000, 390_000),
        ];
        let t = build_template(&extract_digraph_features(&sample, &map).unwrap(), 7, 3).unwrap();
        let csv = write_template_csv(&t);
        assert!(csv.starts_with(TEMPLATE_CSV_HEADER));
        assert_eq!(csv.lines().count(), 6);
        let back = parse_template_csv(&csv).unwrap();
        assert_eq!(back.user_id, 7);
        assert_eq!(back.sample_id, 3);
        assert_eq!(back.counts, t.counts);
        for c in 0..NUM_CLASSES {
            for f in 0..NUM_FEATURES {
                assert!((back.values[c][f] - t.values[c][f]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn template_csv_rejects_short_files() {
        let csv = write_template_csv(&Template {
            user_id: 1,
            sample_id: 1,
            values: [[1.0; NUM_FEATURES]; NUM_CLASSES],
            counts: [1; NUM_CLASSES],
        });
        let truncated: String = csv.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(parse_template_csv(&truncated).is_err());
        assert!(parse_templates_csv("not,a,header\n").is_err());
    }
}
