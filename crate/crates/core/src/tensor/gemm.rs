/// Panics unless a `rows × cols` strided view fits in `len` elements.
pub(super) fn check_extent(rows: usize, cols: usize, len: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides unsupported");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < len, "gemm view {rows}×{cols} {strides:?} exceeds buffer of {len}");
}
