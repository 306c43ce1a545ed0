/* Register-blocked float32 3x3 same-padded convolution kernels (NHWC, HWIO).
 *
 * Specialised for output widths that are multiples of 8 up to 64; callers
 * fall back to the generic loops for anything else. Accumulation order is
 * fixed (taps, then input channels, ascending), so results are identical
 * from run to run.
 */
#ifndef DOCCLEAN_CONV3X3_H
#define DOCCLEAN_CONV3X3_H

#include <stddef.h>
#include <string.h>

typedef float v8f __attribute__((vector_size(32)));
typedef float v8fu __attribute__((vector_size(32), aligned(4)));

#define DC_INLINE static inline __attribute__((always_inline))

DC_INLINE v8f dc_load(const float *p) { return *(const v8fu *)p; }
DC_INLINE void dc_store(float *p, v8f v) { *(v8fu *)p = v; }

/* y[b,i,j,:] += sum_taps sum_c x[b,i+ky-1,j+kx-1,c] * k[ky,kx,c,:] */
DC_INLINE void dc_fwd_tpl(const float *x, const float *k, float *y,
                          ptrdiff_t n, ptrdiff_t h, ptrdiff_t w, ptrdiff_t cin,
                          const float *zeros, const int NV, const int PB)
{
    const ptrdiff_t cout = 8 * NV;
    for (ptrdiff_t b = 0; b < n; b++) {
        const float *xb = x + b * h * w * cin;
        for (ptrdiff_t i = 0; i < h; i++) {
            float *yrow = y + ((b * h + i) * w) * cout;
            ptrdiff_t j = 0;
            for (; j < w; j += PB) {
                const int pb = (j + PB <= w) ? PB : (int)(w - j);
                v8f acc[4][8];
                for (int p = 0; p < PB; p++)
                    for (int v = 0; v < NV; v++)
                        acc[p][v] = (p < pb) ? dc_load(yrow + (j + p) * cout + 8 * v) : (v8f){0};
                for (int ky = 0; ky < 3; ky++) {
                    const ptrdiff_t yy = i + ky - 1;
                    if (yy < 0 || yy >= h)
                        continue;
                    for (int kx = 0; kx < 3; kx++) {
                        const float *xr[4];
                        for (int p = 0; p < PB; p++) {
                            const ptrdiff_t xx = j + p + kx - 1;
                            xr[p] = (p < pb && xx >= 0 && xx < w) ? xb + (yy * w + xx) * cin : zeros;
                        }
                        const float *kt = k + (ptrdiff_t)(ky * 3 + kx) * cin * cout;
                        for (ptrdiff_t c = 0; c < cin; c++) {
                            const float *kr = kt + c * cout;
                            v8f kv[8];
                            for (int v = 0; v < NV; v++)
                                kv[v] = dc_load(kr + 8 * v);
                            for (int p = 0; p < PB; p++) {
                                const float s = xr[p][c];
                                for (int v = 0; v < NV; v++)
                                    acc[p][v] += s * kv[v];
                            }
                        }
                    }
                }
                for (int p = 0; p < pb; p++)
                    for (int v = 0; v < NV; v++)
                        dc_store(yrow + (j + p) * cout + 8 * v, acc[p][v]);
            }
        }
    }
}

/* dk[ky,kx,c,:] += sum_pixels x[b,i+ky-1,j+kx-1,c] * dy[b,i,j,:] */
DC_INLINE void dc_kgrad_tpl(const float *x, const float *dy, float *dk,
                            ptrdiff_t n, ptrdiff_t h, ptrdiff_t w, ptrdiff_t cin,
                            const int NV, const int CB)
{
    const ptrdiff_t cout = 8 * NV;
    const ptrdiff_t RB = 8; /* rows per cache block */
    for (ptrdiff_t b = 0; b < n; b++) {
        const float *xb = x + b * h * w * cin;
        const float *gb = dy + b * h * w * cout;
        for (ptrdiff_t r0 = 0; r0 < h; r0 += RB) {
            const ptrdiff_t r1 = (r0 + RB < h) ? r0 + RB : h;
            for (int ky = 0; ky < 3; ky++) {
                for (int kx = 0; kx < 3; kx++) {
                    const ptrdiff_t j0 = (kx == 0) ? 1 : 0;
                    const ptrdiff_t j1 = (kx == 2) ? w - 1 : w;
                    float *dkt = dk + (ptrdiff_t)(ky * 3 + kx) * cin * cout;
                    ptrdiff_t c0 = 0;
                    for (; c0 < cin; c0 += CB) {
                        const int cb = (c0 + CB <= cin) ? CB : (int)(cin - c0);
                        v8f acc[4][8];
                        for (int q = 0; q < CB; q++)
                            for (int v = 0; v < NV; v++)
                                acc[q][v] = (v8f){0};
                        for (ptrdiff_t i = r0; i < r1; i++) {
                            const ptrdiff_t yy = i + ky - 1;
                            if (yy < 0 || yy >= h)
                                continue;
                            for (ptrdiff_t j = j0; j < j1; j++) {
                                const float *g = gb + (i * w + j) * cout;
                                const float *xr = xb + (yy * w + j + kx - 1) * cin + c0;
                                v8f gv[8];
                                for (int v = 0; v < NV; v++)
                                    gv[v] = dc_load(g + 8 * v);
                                for (int q = 0; q < CB; q++) {
                                    const float s = (q < cb) ? xr[q] : 0.0f;
                                    for (int v = 0; v < NV; v++)
                                        acc[q][v] += s * gv[v];
                                }
                            }
                        }
                        for (int q = 0; q < cb; q++)
                            for (int v = 0; v < NV; v++) {
                                float *dst = dkt + (c0 + q) * cout + 8 * v;
                                dc_store(dst, dc_load(dst) + acc[q][v]);
                            }
                    }
                }
            }
        }
    }
}

/* Returns 0 when no specialisation exists for cout. */
static int dc_conv3x3_f32(const float *x, const float *k, float *y,
                          ptrdiff_t n, ptrdiff_t h, ptrdiff_t w, ptrdiff_t cin,
                          ptrdiff_t cout, const float *zeros)
{
    switch (cout) {
    case 8:  dc_fwd_tpl(x, k, y, n, h, w, cin, zeros, 1, 4); return 1;
    case 16: dc_fwd_tpl(x, k, y, n, h, w, cin, zeros, 2, 4); return 1;
    case 32: dc_fwd_tpl(x, k, y, n, h, w, cin, zeros, 4, 2); return 1;
    case 64: dc_fwd_tpl(x, k, y, n, h, w, cin, zeros, 8, 1); return 1;
    default: return 0;
    }
}

static int dc_kgrad3x3_f32(const float *x, const float *dy, float *dk,
                           ptrdiff_t n, ptrdiff_t h, ptrdiff_t w, ptrdiff_t cin,
                           ptrdiff_t cout)
{
    switch (cout) {
    case 8:  dc_kgrad_tpl(x, dy, dk, n, h, w, cin, 1, 4); return 1;
    case 16: dc_kgrad_tpl(x, dy, dk, n, h, w, cin, 2, 4); return 1;
    case 32: dc_kgrad_tpl(x, dy, dk, n, h, w, cin, 4, 2); return 1;
    case 64: dc_kgrad_tpl(x, dy, dk, n, h, w, cin, 8, 1); return 1;
    default: return 0;
    }
}

#endif
