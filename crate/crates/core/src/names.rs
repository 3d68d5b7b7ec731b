use std::cmp::Ordering;

/// Strips the renamer's trailing apostrophes: `V0''` -> `V0`.
pub fn base_name(name: &str) -> &str {
    name.trim_end_matches('\'')
}

/// Orders identifiers so that embedded numbers compare numerically
/// (`V2 < V10`) and primed copies follow their original (`V0 < V0' < V1`).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (ab, ap) = (base_name(a), a.len() - base_name(a).len());
    let (bb, bp) = (base_name(b), b.len() - base_name(b).len());
    natural_cmp_base(ab, bb).then(ap.cmp(&bp))
}

fn natural_cmp_base(a: &str, b: &str) -> Ordering {
    let mut ai = a.as_bytes();
    let mut bi = b.as_bytes();
    loop {
        match (ai.first(), bi.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let an = ai.iter().take_while(|c| c.is_ascii_digit()).count();
                let bn = bi.iter().take_while(|c| c.is_ascii_digit()).count();
                let (ad, bd) = (&ai[..an], &bi[..bn]);
                let at = trim_zeros(ad);
                let bt = trim_zeros(bd);
                let ord = at.len().cmp(&bt.len()).then_with(|| at.cmp(bt)).then(an.cmp(&bn));
                if ord != Ordering::Equal {
                    return ord;
                }
                ai = &ai[an..];
                bi = &bi[bn..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                ai = &ai[1..];
                bi = &bi[1..];
            }
        }
    }
}

fn trim_zeros(d: &[u8]) -> &[u8] {
    let z = d.iter().take_while(|&&c| c == b'0').count();
    &d[z.min(d.len().saturating_sub(1))..]
}

/// Sorts names in natural order and removes duplicates.
pub(crate) fn sort_names(names: &mut Vec<String>) {
    names.sort_by(|a, b| natural_cmp(a, b));
    names.dedup();
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_segments_compare_by_value() {
        let mut v = vec!["V10", "V2", "V0'", "V1", "V0", "A", "V0''"];
        v.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(v, vec!["A", "V0", "V0'", "V0''", "V1", "V2", "V10"]);
    }

    #[test]
    fn base_name_strips_primes() {
        assert_eq!(base_name("W''"), "W");
        assert_eq!(base_name("W"), "W");
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("V_10"));
        assert!(!is_identifier("1V"));
        assert!(!is_identifier("V'"));
        assert!(!is_identifier(""));
    }
}
