//! Byte sizes with binary suffixes: `4096`, `64KiB`, `2 MiB`, `80GiB`.

pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit() && c != '_').unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let num: u64 = num
        .replace('_', "")
        .parse()
        .map_err(|_| format!("`{s}` is not a size (expected e.g. 4096, 2MiB, 80GiB)"))?;
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kib" => 1 << 10,
        "m" | "mib" => 1 << 20,
        "g" | "gib" => 1 << 30,
        "t" | "tib" => 1 << 40,
        other => return Err(format!("unknown size unit `{other}` in `{s}` (B, KiB, MiB, GiB, TiB)")),
    };
    num.checked_mul(mult).ok_or_else(|| format!("`{s}` overflows 64 bits"))
}

pub fn format_bytes(b: u64) -> String {
    const UNITS: [(&str, u64); 4] = [("TiB", 1 << 40), ("GiB", 1 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10)];
    for (name, size) in UNITS {
        if b >= size {
            return format!("{:.2}{name}", b as f64 / size as f64);
        }
    }
    format!("{b}B")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffixes() {
        assert_eq!(parse_bytes("4096").unwrap(), 4096);
        assert_eq!(parse_bytes("64KiB").unwrap(), 65536);
        assert_eq!(parse_bytes("2 MiB").unwrap(), 2 << 20);
        assert_eq!(parse_bytes("80gib").unwrap(), 80 << 30);
        assert_eq!(parse_bytes("1_024").unwrap(), 1024);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_bytes("GiB").is_err());
        assert!(parse_bytes("12 parsecs").is_err());
        assert!(parse_bytes("99999999999TiB").is_err());
    }

    #[test]
    fn formats() {
        assert_eq!(format_bytes(12 << 30), "12.00GiB");
        assert_eq!(format_bytes(100), "100B");
    }
}
