#include <math.h>
#include <stdio.h>
#include "gdt.h"

int main(void) {
    const double data[6] = {3.0, 0.0, 1.0, 1.0, 0.0, 0.1};
    GdtMat *m = NULL, *t = NULL;
    if (gdt_mat_new(3, 2, data, &m) != GDT_STATUS_OK) return 1;
    if (gdt_hard_threshold_rows(m, 1, &t) != GDT_STATUS_OK) return 2;
    double out[6];
    if (gdt_mat_copy_data(t, out, 6) != GDT_STATUS_OK) return 3;
    if (out[0] != 3.0 || out[2] != 0.0 || out[3] != 0.0) return 4;
    if (gdt_mat_new(1, 1, NULL, &m) != GDT_STATUS_NULL_POINTER) return 5;
    if (gdt_last_error_message() == NULL) return 6;
    GdtSolveConfig cfg = gdt_solve_config_default();
    if (cfg.max_iters == 0 || cfg.rank != 0) return 7;
    gdt_mat_free(t);
    gdt_mat_free(m);
    puts("ok");
    return 0;
}
