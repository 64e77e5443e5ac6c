//! Binary PPM (P6) classification maps.

/// Colours of classes 1..=16. Class 0 (unlabelled) is black.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 205, 0],
    [127, 255, 0],
    [46, 139, 87],
    [0, 139, 0],
    [160, 82, 45],
    [0, 255, 255],
    [255, 255, 255],
    [216, 191, 216],
    [255, 0, 0],
    [139, 0, 0],
    [100, 100, 100],
    [255, 255, 0],
    [238, 154, 0],
    [85, 26, 139],
    [255, 127, 80],
    [0, 0, 255],
];

/// Colour of `class`: black for 0, the palette for 1..=16, and beyond that
/// a hue stepped by the golden ratio at fixed saturation and value.
pub fn class_color(class: u16) -> [u8; 3] {
    match class {
        0 => [0, 0, 0],
        c if (c as usize) <= PALETTE.len() => PALETTE[c as usize - 1],
        c => {
            let h = (c as f64 * 0.618_033_988_749_895).fract() * 6.0;
            let (s, v) = (0.65, 0.95);
            let f = h.fract();
            let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
            let (r, g, b) = match h as u32 {
                0 => (v, t, p),
                1 => (q, v, p),
                2 => (p, v, t),
                3 => (p, q, v),
                4 => (t, p, v),
                _ => (v, p, q),
            };
            [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
        }
    }
}

/// Encodes a row-major class grid as P6 with a maxval of 255.
pub fn encode(classes: &[u16], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(classes.len(), width * height, "class grid size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(classes.len() * 3);
    for &c in classes {
        out.extend_from_slice(&class_color(c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_pixels() {
        let img = encode(&[0, 1, 2, 16], 2, 2);
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[0, 0, 0, 0, 205, 0, 127, 255, 0, 0, 0, 255]);
    }

    #[test]
    fn extended_colours_are_distinct_and_nonblack() {
        let colours: Vec<[u8; 3]> = (1..=40).map(class_color).collect();
        for (i, a) in colours.iter().enumerate() {
            assert_ne!(*a, [0, 0, 0]);
            for b in &colours[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }
}
