#include <math.h>
#include <stdio.h>
#include "aerman.h"

int main(void) {
    AmModel *model = NULL;
    if (am_model_two_link(&model) != AM_STATUS_OK) return 1;

    size_t n = 0, ni = 0, nf = 0;
    am_model_dims(model, &n, &ni, &nf);
    if (n != 15 || ni != 6 || nf != 21) return 2;

    double q[15] = {0};
    double u[6] = {0};
    double dq[15];
    q[13] = 4.2 * 9.81;
    if (am_extended_dynamics(model, q, n, u, ni, dq, n) != AM_STATUS_OK) return 3;

    if (am_extended_dynamics(model, q, n - 1, u, ni, dq, n) != AM_STATUS_INVALID_ARGUMENT) return 4;
    const char *msg = am_last_error();
    if (msg == NULL) return 5;

    AmController *ctrl = NULL;
    if (am_controller_new(model, NULL, 0, 0.0, &ctrl) != AM_STATUS_OK) return 6;
    double flat[21];
    AmStepInfo info;
    if (am_flat_outputs(model, q, n, u, ni, flat, nf) != AM_STATUS_OK) return 7;
    if (am_controller_step(ctrl, q, n, flat, nf, u, ni, &info) != AM_STATUS_OK) return 8;
    if (!isfinite(info.value) || info.value > 1e-9) return 9;

    am_controller_free(ctrl);
    am_model_free(model);
    printf("ok %s\n", msg);
    return 0;
}
