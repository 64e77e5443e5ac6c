#![no_main]

use arbitrary::Arbitrary;
use libfuzzer_sys::fuzz_target;
use lsaf_core::data::raster::RasterData;
use lsaf_core::data::{DType, RasterFile, RasterHeader};

#[derive(Arbitrary, Debug)]
struct Input {
    bands: u8,
    height: u8,
    width: u8,
    tag: u8,
    words: Vec<u64>,
}

fuzz_target!(|input: Input| {
    let (b, h, w) = (input.bands as usize % 4 + 1, input.height as usize % 9 + 1, input.width as usize % 9 + 1);
    let n = b * h * w;
    let word = |i: usize| input.words.get(i % input.words.len().max(1)).copied().unwrap_or(0);
    let (dtype, data) = match input.tag % 3 {
        0 => (DType::F32, RasterData::F32((0..n).map(|i| f32::from_bits(word(i) as u32)).collect())),
        1 => (DType::U16, RasterData::U16((0..n).map(|i| word(i) as u16).collect())),
        _ => (DType::F64, RasterData::F64((0..n).map(|i| f64::from_bits(word(i))).collect())),
    };
    let file = RasterFile {
        header: RasterHeader {
            bands: b as u32,
            height: h as u32,
            width: w as u32,
            dtype,
        },
        data,
    };
    let bytes = file.encode();
    let back = RasterFile::decode(&bytes).expect("encoded raster must decode");
    assert_eq!(back.encode(), bytes);
});
