#![no_main]

use libfuzzer_sys::fuzz_target;
use mpiforge::io::args::{parse_color, parse_list, parse_range, parse_size, parse_views};

fuzz_target!(|text: &str| {
    if let Ok((w, h)) = parse_size(text) {
        assert!(w > 0 && h > 0);
    }
    if let Ok(names) = parse_views(text) {
        assert!(names.iter().all(|n| !n.is_empty()));
    }
    if let Ok(rgb) = parse_color(text) {
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    if let Ok([lo, hi]) = parse_range(text) {
        assert!(lo <= hi);
    }
    let _ = parse_list(text);
});
