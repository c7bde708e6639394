/* cc generate.c -I../include -L<target dir> -lduodec_ffi -lpthread -ldl -lm */
#include <stdio.h>
#include <stdlib.h>

#include "duodec.h"

static int check(DuodecStatus s) {
    if (s != DUODEC_STATUS_OK) {
        const char *msg = duodec_last_error();
        fprintf(stderr, "duodec: %s\n", msg ? msg : "unknown error");
        exit((int)s);
    }
    return 0;
}

int main(int argc, char **argv) {
    if (argc < 3) {
        fprintf(stderr, "usage: %s TARGET DRAFT [PRESET]\n", argv[0]);
        return 2;
    }
    DuodecModel *target = NULL, *draft = NULL;
    DuodecProfile *profile = NULL;
    DuodecResult *result = NULL;
    check(duodec_model_load(argv[1], &target));
    check(duodec_model_load(argv[2], &draft));
    check(duodec_profile_preset(argc > 3 ? argv[3] : "balanced", &profile));

    DuodecConfig cfg = duodec_config_default();
    cfg.gamma = 0;
    cfg.max_new_tokens = 32;
    uint32_t prompt[] = {0};
    check(duodec_generate(target, draft, profile, prompt, 1, &cfg, &result));

    size_t n = duodec_result_len(result);
    uint32_t *tokens = malloc(n * sizeof *tokens);
    duodec_result_tokens(result, tokens, n);
    for (size_t i = 0; i < n; i++) {
        printf("%u%c", tokens[i], i + 1 == n ? '\n' : ' ');
    }
    printf("tps %.1f ttft %.2f ms\n", duodec_result_tps(result), duodec_result_ttft_ms(result));

    free(tokens);
    duodec_result_free(result);
    duodec_profile_free(profile);
    duodec_model_free(draft);
    duodec_model_free(target);
    return 0;
}
