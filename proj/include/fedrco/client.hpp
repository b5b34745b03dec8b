#pragma once

#include <cstddef>

#include "fedrco/data.hpp"
#include "fedrco/kfac.hpp"
#include "fedrco/model.hpp"
#include "fedrco/stability.hpp"

namespace fedrco {

struct ClientState {
  std::size_t id = 0;
  model::Network net;
  kfac::KfacState kfac;
  stability::NormHistory history;
  std::size_t consecutive_low = 0;
  // Acc': accuracy of the local model on the local data at the end of the
  // client's most recent round.
  double local_accuracy = 0.0;
  // False until the client first receives a global model.
  bool synced = false;
  data::Dataset data;

  ClientState(std::size_t client_id, model::Network network, data::Dataset local,
              std::size_t window)
      : id(client_id),
        net(std::move(network)),
        kfac(kfac::make_state(net)),
        history(window),
        data(std::move(local)) {}

  std::size_t data_size() const { return data.size(); }
};

}  // namespace fedrco
