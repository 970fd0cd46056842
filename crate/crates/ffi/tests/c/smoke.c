#include <math.h>
#include <stdio.h>
#include <string.h>

#include "cddpm.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "check failed at line %d: %s\n", __LINE__, #cond); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    double a_data[2 * 8 * 8];
    double b_data[2 * 8 * 8];
    uint8_t m_data[2 * 8 * 8];
    for (int i = 0; i < 2 * 8 * 8; i++) {
        a_data[i] = (i % 7) / 7.0;
        b_data[i] = (i % 5) / 5.0;
        m_data[i] = (uint8_t)(i % 3 == 0);
    }
    CddpmVolume *a = NULL, *b = NULL;
    CddpmMask *m = NULL;
    CHECK(cddpm_volume_new(2, 8, 8, a_data, &a) == CDDPM_STATUS_OK);
    CHECK(cddpm_volume_new(2, 8, 8, b_data, &b) == CDDPM_STATUS_OK);
    CHECK(cddpm_mask_new(2, 8, 8, m_data, &m) == CDDPM_STATUS_OK);

    double r = 0.0;
    CHECK(cddpm_psnr(a, a, &r) == CDDPM_STATUS_OK && isinf(r));
    CHECK(cddpm_ssim(a, b, &r) == CDDPM_STATUS_OK && r < 1.0);
    CHECK(cddpm_dice(m, m, &r) == CDDPM_STATUS_OK && r == 1.0);
    CHECK(cddpm_histogram_kld(a, b, m, &r) == CDDPM_STATUS_OK && r > 0.0);

    CddpmPostProc settings = cddpm_postproc_default();
    CddpmVolume *score = NULL;
    CHECK(cddpm_score_map(a, b, m, &settings, &score) == CDDPM_STATUS_OK);
    CddpmMask *seg = NULL;
    CHECK(cddpm_segment(score, 0.5, &settings, &seg) == CDDPM_STATUS_OK);

    CddpmVolume *bad = NULL;
    CHECK(cddpm_volume_new(0, 8, 8, a_data, &bad) == CDDPM_STATUS_INVALID_ARGUMENT);
    CHECK(bad == NULL);
    CHECK(strlen(cddpm_last_error_message()) > 0);
    CHECK(cddpm_psnr(a, NULL, &r) == CDDPM_STATUS_NULL_POINTER);

    cddpm_mask_free(seg);
    cddpm_volume_free(score);
    cddpm_mask_free(m);
    cddpm_volume_free(a);
    cddpm_volume_free(b);
    printf("cddpm %s ok\n", cddpm_version());
    return 0;
}
