#include <stdio.h>
#include <string.h>
#include "advtrain.h"

int main(void) {
    if (strlen(advtrain_version()) == 0) return 10;

    AdvtrainDataset *data = NULL;
    const char *spec = "{\"num_examples\": 30, \"vocab_size\": 20, \"seq_len\": 5,"
                       " \"options\": 3, \"key_token_count\": 5,"
                       " \"label_noise_rate\": 0.0, \"seed\": 3}";
    if (advtrain_dataset_generate(spec, &data) != ADVTRAIN_STATUS_OK) return 11;
    size_t len = 0;
    if (advtrain_dataset_len(data, &len) != ADVTRAIN_STATUS_OK || len != 30) return 12;

    AdvtrainModel *model = NULL;
    const char *cfg = "{\"vocab_size\": 20, \"d_emb\": 4, \"hidden\": [], \"dropout_rate\": 0.0}";
    if (advtrain_model_init(cfg, 11, &model) != ADVTRAIN_STATUS_OK) return 13;

    char *log_json = NULL;
    const char *opts = "{\"train\": {\"epochs\": 1, \"batch_size\": 16, \"seed\": 5}}";
    if (advtrain_train(model, data, opts, &log_json) != ADVTRAIN_STATUS_OK) {
        fprintf(stderr, "train: %s\n", advtrain_last_error_message());
        return 14;
    }
    if (log_json == NULL || strstr(log_json, "best_epoch") == NULL) return 15;
    advtrain_string_free(log_json);

    char *report = NULL;
    if (advtrain_evaluate(model, data, NULL, 0, &report) != ADVTRAIN_STATUS_OK) return 16;
    if (strstr(report, "accuracy") == NULL) return 17;
    advtrain_string_free(report);

    /* Error path: status and message. */
    AdvtrainDataset *missing = NULL;
    if (advtrain_dataset_load("/nope/missing.json", &missing) != ADVTRAIN_STATUS_RUNTIME_ERROR)
        return 18;
    if (strlen(advtrain_last_error_message()) == 0) return 19;

    bool passed = false;
    if (advtrain_gradcheck(2, 1e-4, 1e-5, 9, &passed, NULL) != ADVTRAIN_STATUS_OK || !passed)
        return 20;

    advtrain_model_free(model);
    advtrain_dataset_free(data);
    puts("c smoke test: ok");
    return 0;
}
