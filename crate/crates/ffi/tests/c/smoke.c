#include <stdio.h>
#include <string.h>
#include "nnleak.h"

static const char *MODEL =
    "net fixed 1 allow-zero\n"
    "layer 1 9 relu\n"
    "-1 -3 4 -7 -8 2 -6 5 0\n"
    "bias 108\n";

int main(void) {
    NnleakModel *truth = NULL, *rec = NULL;
    NnleakOracle *dev = NULL;
    char *a = NULL, *b = NULL;
    if (nnleak_model_parse(MODEL, &truth) != NNLEAK_STATUS_OK) return 1;
    if (nnleak_oracle_new(truth, NULL, 0.0, 1, 1, &dev) != NNLEAK_STATUS_OK) return 2;
    if (nnleak_attack_model(dev, 1, &rec) != NNLEAK_STATUS_OK) return 3;
    nnleak_model_write(truth, &a);
    nnleak_model_write(rec, &b);
    int same = strcmp(a, b) == 0;
    if (nnleak_model_parse("net bogus", &rec) != NNLEAK_STATUS_PARSE || nnleak_last_error() == NULL) return 4;
    printf("recovered=%s\n", same ? "exact" : "differs");
    nnleak_string_free(a);
    nnleak_string_free(b);
    nnleak_oracle_free(dev);
    nnleak_model_free(truth);
    return same ? 0 : 5;
}
