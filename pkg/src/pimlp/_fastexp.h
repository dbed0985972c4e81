/* Branch-free single-precision exp for x <= 0 (positive inputs clamp to 0), written so GCC can vectorize
   loops that call it. Relative error about 1.2e-7 on [-80, 0]. */
#ifndef PIMLP_FASTEXP_H
#define PIMLP_FASTEXP_H
#include <stdint.h>
#include <string.h>

static inline float pimlp_expf_neg(float x)
{
    const float log2e = 1.44269504088896341f;
    const float ln2_hi = 0.693359375f;
    const float ln2_lo = -2.12194440e-4f;
    float n, r, p, scale;
    int32_t bits;
    x = x < -87.0f ? -87.0f : x;
    x = x > 0.0f ? 0.0f : x;
    n = (float)(int32_t)(x * log2e - 0.5f);  /* x <= 0: truncation rounds to nearest */
    r = x - n * ln2_hi - n * ln2_lo;
    p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    bits = ((int32_t)n + 127) << 23;
    memcpy(&scale, &bits, sizeof scale);
    return p * scale;
}
#endif
