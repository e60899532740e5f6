//! Convolution kernels against direct nested-loop references.

use ape_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct cross-correlation: out[n,o,y,x] = sum_{c,i,j} in[n,c,y*s+i-p,x*s+j-p] * w[o,c,i,j].
fn conv_reference(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, c, h, w]: [usize; 4] = input.shape().try_into().unwrap();
    let [o, _, kh, kw]: [usize; 4] = kernel.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.data()[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                    * kernel.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Direct transposed convolution by scattering each input pixel.
fn conv_transpose_reference(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, ci, h, w]: [usize; 4] = input.shape().try_into().unwrap();
    let [_, co, kh, kw]: [usize; 4] = kernel.shape().try_into().unwrap();
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for ic in 0..ci {
            for y in 0..h {
                for x in 0..w {
                    let v = input.data()[((b * ci + ic) * h + y) * w + x];
                    for oc in 0..co {
                        for i in 0..kh {
                            for j in 0..kw {
                                let oy = (y * stride + i) as isize - pad as isize;
                                let ox = (x * stride + j) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((b * co + oc) * oh + oy as usize) * ow + ox as usize] +=
                                    v * kernel.data()[((ic * co + oc) * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn ones_kernel_sums_windows() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::<f64>::ones(&[1, 1, 2, 2]));
    let y = x.conv2d(w, None, (1, 1), (0, 0)).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 4.0));
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&[2, 3, 4, 5], &mut rng);
    let mut k = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let tape = Tape::new();
    let y = tape
        .constant(input.clone())
        .conv2d(tape.constant(k), None, (1, 1), (0, 0))
        .unwrap()
        .value();
    assert_eq!(y.data(), input.data());
}

#[test]
fn matches_nested_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = random(&[1, 2, 5, 5], &mut rng);
    let kernel = random(&[3, 2, 3, 3], &mut rng);
    let tape = Tape::new();
    let y = tape
        .constant(input.clone())
        .conv2d(tape.constant(kernel.clone()), None, (1, 1), (0, 0))
        .unwrap()
        .value();
    assert!(max_abs_diff(&y, &conv_reference(&input, &kernel, 1, 0)) < 1e-6);
}

#[test]
fn strided_padded_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for &(stride, pad, k) in &[(2, 1, 4), (2, 1, 3), (1, 1, 3), (3, 2, 5), (2, 3, 3)] {
        let input = random(&[2, 3, 9, 7], &mut rng);
        let kernel = random(&[4, 3, k, k], &mut rng);
        let tape = Tape::new();
        let y = tape
            .constant(input.clone())
            .conv2d(tape.constant(kernel.clone()), None, (stride, stride), (pad, pad))
            .unwrap()
            .value();
        assert!(max_abs_diff(&y, &conv_reference(&input, &kernel, stride, pad)) < 1e-12);
    }
}

#[test]
fn transposed_matches_scatter_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &(stride, pad, k) in &[(2, 1, 4), (1, 0, 3), (2, 0, 2)] {
        let input = random(&[2, 3, 4, 5], &mut rng);
        let kernel = random(&[3, 2, k, k], &mut rng);
        let tape = Tape::new();
        let y = tape
            .constant(input.clone())
            .conv_transpose2d(tape.constant(kernel.clone()), None, (stride, stride), (pad, pad))
            .unwrap()
            .value();
        assert!(max_abs_diff(&y, &conv_transpose_reference(&input, &kernel, stride, pad)) < 1e-12);
    }
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 2, 5, 5]));
    let w = tape.constant(Tensor::<f64>::zeros(&[3, 4, 3, 3]));
    let err = x.conv2d(w, None, (1, 1), (0, 0)).unwrap_err().to_string();
    assert!(err.contains("2 channels") && err.contains("expects 4"), "{err}");
    let w = tape.constant(Tensor::<f64>::zeros(&[3, 2, 7, 7]));
    assert!(x.conv2d(w, None, (1, 1), (0, 0)).is_err());
}

#[test]
fn f32_conv_agrees_with_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let input = random(&[1, 3, 8, 8], &mut rng);
    let kernel = random(&[4, 3, 3, 3], &mut rng);
    let t64 = Tape::new();
    let y64 = t64
        .constant(input.clone())
        .conv2d(t64.constant(kernel.clone()), None, (2, 2), (1, 1))
        .unwrap()
        .value();
    let t32 = Tape::<f32>::new();
    let y32 = t32
        .constant(input.cast())
        .conv2d(t32.constant(kernel.cast()), None, (2, 2), (1, 1))
        .unwrap()
        .value();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}
